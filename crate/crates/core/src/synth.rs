//! Synthetic hierarchies and corpora with planted keywords, for tests,
//! benchmarks and desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CveRecord;
use crate::error::{Error, Result};
use crate::hierarchy::{CweDefinition, CweHierarchy, CweId};

const FILLER: &[&str] = &[
    "allows",
    "remote",
    "attackers",
    "to",
    "via",
    "a",
    "crafted",
    "request",
    "in",
    "the",
    "component",
    "when",
    "handling",
    "input",
    "which",
    "could",
    "lead",
    "an",
    "issue",
    "affected",
    "versions",
    "before",
    "user",
    "server",
    "application",
    "module",
    "function",
    "data",
    "may",
    "be",
    "used",
    "by",
    "local",
    "through",
];

const CONSONANTS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Nodes per level; level-`l+1` node `i` hangs under level-`l` node
    /// `i mod size(l)`.
    pub level_sizes: Vec<usize>,
    pub cves: usize,
    pub keywords_per_cwe: usize,
    /// Own keywords sampled into each CVE.
    pub keywords_in_cve: usize,
    /// Keywords sampled from each ancestor into each CVE.
    pub ancestor_keywords: usize,
    pub filler_words: usize,
    /// Label frequency ∝ 1 / rank^skew over a seeded node order; 0 is uniform.
    pub skew: f64,
    pub years: (i32, i32),
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 200 CVEs over a 12-node, 3-level hierarchy.
    fn default() -> Self {
        SynthConfig {
            level_sizes: vec![3, 6, 3],
            cves: 200,
            keywords_per_cwe: 4,
            keywords_in_cve: 3,
            ancestor_keywords: 2,
            filler_words: 6,
            skew: 0.0,
            years: (2010, 2020),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub hierarchy: CweHierarchy,
    pub records: Vec<CveRecord>,
    pub keywords: BTreeMap<CweId, Vec<String>>,
}

fn pseudo_words<R: Rng>(n: usize, rng: &mut R) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    CONSONANTS.choose(rng).unwrap(),
                    VOWELS.choose(rng).unwrap()
                )
            })
            .collect();
        if !FILLER.contains(&w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Layered hierarchy with ids `SYN-<level><index>` (e.g. `SYN-1-03`).
pub fn layered_hierarchy(
    level_sizes: &[usize],
    keywords: &BTreeMap<CweId, Vec<String>>,
) -> Result<CweHierarchy> {
    let ids = layered_ids(level_sizes);
    let mut defs = Vec::new();
    let mut edges = Vec::new();
    for (l, level) in ids.iter().enumerate() {
        for (i, id) in level.iter().enumerate() {
            let kw = keywords.get(id).map(|k| k.join(" ")).unwrap_or_default();
            defs.push(CweDefinition {
                id: id.clone(),
                name: format!("Synthetic weakness {id}"),
                description: format!(
                    "Weakness class {kw}. The product mishandles {kw} during processing."
                ),
            });
            if l > 0 {
                let parents = &ids[l - 1];
                edges.push((id.clone(), parents[i % parents.len()].clone()));
            }
        }
    }
    CweHierarchy::from_parts(defs, edges)
}

fn layered_ids(level_sizes: &[usize]) -> Vec<Vec<CweId>> {
    level_sizes
        .iter()
        .enumerate()
        .map(|(l, n)| {
            (0..*n)
                .map(|i| CweId::new(format!("SYN-{}-{i:02}", l + 1)))
                .collect()
        })
        .collect()
}

/// Generates the hierarchy and `cfg.cves` records. Each CVE carries one
/// label; its text mixes that CWE's keywords, one or more keywords of each
/// ancestor, and shared filler words.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.level_sizes.is_empty() || cfg.level_sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "every level needs at least one node".into(),
        ));
    }
    if cfg.keywords_in_cve > cfg.keywords_per_cwe || cfg.ancestor_keywords > cfg.keywords_per_cwe {
        return Err(Error::InvalidArgument(
            "cannot sample more keywords than a CWE has".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<CweId> = layered_ids(&cfg.level_sizes)
        .into_iter()
        .flatten()
        .collect();
    let words = pseudo_words(ids.len() * cfg.keywords_per_cwe, &mut rng);
    let keywords: BTreeMap<CweId, Vec<String>> = ids
        .iter()
        .zip(words.chunks(cfg.keywords_per_cwe))
        .map(|(id, w)| (id.clone(), w.to_vec()))
        .collect();
    let hierarchy = layered_hierarchy(&cfg.level_sizes, &keywords)?;

    let mut ranked = ids.clone();
    ranked.shuffle(&mut rng);
    let weights: Vec<f64> = (0..ranked.len())
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.skew))
        .collect();
    let total: f64 = weights.iter().sum();

    let mut records = Vec::with_capacity(cfg.cves);
    for n in 0..cfg.cves {
        let mut x = rng.random::<f64>() * total;
        let mut pick = ranked.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                pick = i;
                break;
            }
            x -= w;
        }
        let label = ranked[pick].clone();
        let mut tokens: Vec<String> = keywords[&label]
            .choose_multiple(&mut rng, cfg.keywords_in_cve)
            .cloned()
            .collect();
        for a in hierarchy.ancestors(label.as_str())? {
            tokens.extend(
                keywords[&a]
                    .choose_multiple(&mut rng, cfg.ancestor_keywords)
                    .cloned(),
            );
        }
        tokens.extend((0..cfg.filler_words).map(|_| FILLER.choose(&mut rng).unwrap().to_string()));
        tokens.shuffle(&mut rng);
        let year = rng.random_range(cfg.years.0..=cfg.years.1);
        let mut text = tokens.join(" ");
        if let Some(first) = text.get_mut(..1) {
            first.make_ascii_uppercase();
        }
        text.push('.');
        records.push(CveRecord {
            id: format!("CVE-{year}-{:05}", n + 1),
            description: text,
            year,
            labels: BTreeSet::from([label]),
        });
    }
    Ok(SynthCorpus {
        hierarchy,
        records,
        keywords,
    })
}

/// The partial hierarchy used to illustrate hierarchical prediction:
/// CWE-668, CWE-404 and CWE-20 at level 1 with their subtrees.
pub fn illustrative_hierarchy() -> CweHierarchy {
    let nodes: &[(&str, &str, &str)] = &[
        (
            "CWE-668",
            "Exposure of Resource to Wrong Sphere",
            "A resource is made reachable by actors who should not have access to it.",
        ),
        (
            "CWE-200",
            "Exposure of Sensitive Information to an Unauthorized Actor",
            "Sensitive information is disclosed to an actor not authorized to read it.",
        ),
        (
            "CWE-203",
            "Observable Discrepancy",
            "Behaviour or responses differ observably in ways that reveal security relevant state.",
        ),
        (
            "CWE-532",
            "Insertion of Sensitive Information into Log File",
            "Sensitive information is written to a log file.",
        ),
        (
            "CWE-209",
            "Generation of Error Message Containing Sensitive Information",
            "An error message includes sensitive details about the environment, users or data.",
        ),
        (
            "CWE-426",
            "Untrusted Search Path",
            "A search path that points to resources outside the product's control is used.",
        ),
        (
            "CWE-427",
            "Uncontrolled Search Path Element",
            "A search path element can be influenced by an attacker to load unintended resources.",
        ),
        (
            "CWE-404",
            "Improper Resource Shutdown or Release",
            "A resource is not released or is released incorrectly before reuse.",
        ),
        (
            "CWE-459",
            "Incomplete Cleanup",
            "Temporary or supporting resources are not cleaned up after use.",
        ),
        (
            "CWE-772",
            "Missing Release of Resource after Effective Lifetime",
            "A resource is not released after it is no longer needed.",
        ),
        (
            "CWE-401",
            "Missing Release of Memory after Effective Lifetime",
            "Allocated memory is not freed after it is no longer needed, leaking memory.",
        ),
        (
            "CWE-20",
            "Improper Input Validation",
            "Input is not validated or is validated incorrectly before processing.",
        ),
        (
            "CWE-119",
            "Improper Restriction of Operations within the Bounds of a Memory Buffer",
            "Memory operations read or write outside the intended buffer boundary.",
        ),
        (
            "CWE-120",
            "Buffer Copy without Checking Size of Input",
            "Input is copied into a buffer without checking that it fits.",
        ),
        (
            "CWE-125",
            "Out-of-bounds Read",
            "Data is read past the end or before the beginning of a buffer.",
        ),
        (
            "CWE-787",
            "Out-of-bounds Write",
            "Data is written past the end or before the beginning of a buffer.",
        ),
        (
            "CWE-129",
            "Improper Validation of Array Index",
            "An untrusted value is used as an array index without checking its range.",
        ),
    ];
    let edges: &[(&str, &str)] = &[
        ("CWE-200", "CWE-668"),
        ("CWE-426", "CWE-668"),
        ("CWE-427", "CWE-668"),
        ("CWE-203", "CWE-200"),
        ("CWE-532", "CWE-200"),
        ("CWE-209", "CWE-200"),
        ("CWE-459", "CWE-404"),
        ("CWE-772", "CWE-404"),
        ("CWE-401", "CWE-772"),
        ("CWE-119", "CWE-20"),
        ("CWE-129", "CWE-20"),
        ("CWE-120", "CWE-119"),
        ("CWE-125", "CWE-119"),
        ("CWE-787", "CWE-119"),
    ];
    let defs = nodes
        .iter()
        .map(|(id, name, desc)| CweDefinition {
            id: CweId::new(*id),
            name: name.to_string(),
            description: desc.to_string(),
        })
        .collect();
    let edges: Vec<(CweId, CweId)> = edges
        .iter()
        .map(|(c, p)| (CweId::new(*c), CweId::new(*p)))
        .collect();
    CweHierarchy::from_parts(defs, edges).expect("static hierarchy is valid")
}

/// A 124-node hierarchy with 34 roots, 78 nodes at level 2 and 16 at
/// level 3 (four nodes sit at both levels 2 and 3 via two parents).
pub fn reference_shaped_hierarchy() -> CweHierarchy {
    let id = |prefix: &str, i: usize| CweId::new(format!("REF-{prefix}{i:03}"));
    let roots: Vec<CweId> = (0..34).map(|i| id("R", i)).collect();
    let level2: Vec<CweId> = (0..74).map(|i| id("M", i)).collect();
    let level3: Vec<CweId> = (0..12).map(|i| id("L", i)).collect();
    let dual: Vec<CweId> = (0..4).map(|i| id("D", i)).collect();
    let mut edges = Vec::new();
    for (i, c) in level2.iter().enumerate() {
        edges.push((c.clone(), roots[i % roots.len()].clone()));
    }
    for (i, c) in level3.iter().enumerate() {
        edges.push((c.clone(), level2[i / 3].clone()));
    }
    for (i, c) in dual.iter().enumerate() {
        edges.push((c.clone(), roots[10 + i].clone()));
        edges.push((c.clone(), level2[4].clone()));
    }
    let defs = roots
        .iter()
        .chain(&level2)
        .chain(&level3)
        .chain(&dual)
        .map(|i| CweDefinition {
            id: i.clone(),
            name: format!("Reference-shaped node {i}"),
            description: format!("Placeholder definition for {i}."),
        })
        .collect();
    CweHierarchy::from_parts(defs, edges).expect("static hierarchy is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_shape() {
        let c = generate(&SynthConfig::default()).unwrap();
        assert_eq!(c.hierarchy.len(), 12);
        assert_eq!(c.records.len(), 200);
        assert_eq!(
            c.hierarchy.level_counts(),
            BTreeMap::from([(1, 3), (2, 6), (3, 3)])
        );
        for r in &c.records {
            let label = r.labels.iter().next().unwrap();
            let text = r.description.to_lowercase();
            let hits = c.keywords[label]
                .iter()
                .filter(|k| text.contains(k.as_str()))
                .count();
            assert!(hits >= 3, "{text}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.records, b.records);
        let c = generate(&SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn illustrative_levels() {
        let h = illustrative_hierarchy();
        assert_eq!(h.len(), 17);
        assert_eq!(h.roots().len(), 3);
        assert_eq!(h.children("CWE-668").unwrap().len(), 3);
    }

    #[test]
    fn reference_shape_counts() {
        let h = reference_shaped_hierarchy();
        assert_eq!(h.len(), 124);
        assert_eq!(
            h.level_counts(),
            BTreeMap::from([(1, 34), (2, 78), (3, 16)])
        );
    }
}
