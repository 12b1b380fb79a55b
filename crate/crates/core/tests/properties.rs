//! Property tests over random DAGs, scores and corpora.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use v2w_core::corpus::{random_split, CveRecord};
use v2w_core::eval::{detect_new_cwe, path_accuracy, LinkScorer, Novelty, REPORT_TRIPLES};
use v2w_core::hierarchy::{CweDefinition, CweHierarchy, CweId, KTriple, PredictionPath, MAX_DEPTH};
use v2w_core::tokenizer::{mask, Vocabulary, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use v2w_core::trainer::{balance, generate_links, BalanceMode, TrainingCweSet};
use v2w_core::{LinkScore, Result};

fn id(i: usize) -> CweId {
    CweId::new(format!("CWE-{i}"))
}

/// Node `j` may have parents among `0..j`, so every draw is acyclic.
fn dag(max_nodes: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..=max_nodes).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (1..n).flat_map(|c| (0..c).map(move |p| (c, p))).collect();
        let len = pairs.len();
        (
            Just(n),
            proptest::sample::subsequence(pairs, 0..=len.min(3 * n)),
        )
    })
}

fn build(n: usize, edges: &[(usize, usize)]) -> CweHierarchy {
    let defs = (0..n)
        .map(|i| CweDefinition {
            id: id(i),
            name: format!("n{i}"),
            description: format!("node {i}"),
        })
        .collect();
    CweHierarchy::from_parts(defs, edges.iter().map(|(c, p)| (id(*c), id(*p)))).unwrap()
}

fn ancestor_fixpoint(n: usize, edges: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let mut anc = vec![BTreeSet::new(); n];
    loop {
        let mut changed = false;
        for (c, p) in edges {
            let mut add: BTreeSet<usize> = anc[*p].clone();
            add.insert(*p);
            for a in add {
                changed |= anc[*c].insert(a);
            }
        }
        if !changed {
            return anc;
        }
    }
}

fn scores_for(h: &CweHierarchy, raw: &[u8]) -> BTreeMap<CweId, f64> {
    // Coarse values so ties are common.
    h.ids()
        .enumerate()
        .map(|(i, id)| (id.clone(), f64::from(raw[i % raw.len()] % 5) / 4.0))
        .collect()
}

/// Rank of `node` among `candidates`: descending score, ascending id.
fn rank(node: &CweId, candidates: &BTreeSet<CweId>, scores: &BTreeMap<CweId, f64>) -> usize {
    candidates
        .iter()
        .filter(|c| scores[*c] > scores[node] || (scores[*c] == scores[node] && *c < node))
        .count()
}

/// Every root-to-leaf path (cut at depth three) whose nodes all rank within
/// their level budget.
fn brute_force_paths(
    h: &CweHierarchy,
    scores: &BTreeMap<CweId, f64>,
    k: KTriple,
) -> BTreeSet<Vec<CweId>> {
    let budget = k.as_array();
    let level1: BTreeSet<CweId> = h.nodes_at_level(1).into_iter().collect();
    let mut out = BTreeSet::new();
    let mut stack: Vec<Vec<CweId>> = level1
        .iter()
        .filter(|n| rank(n, &level1, scores) < budget[0])
        .map(|n| vec![n.clone()])
        .collect();
    while let Some(path) = stack.pop() {
        let last = path.last().unwrap();
        let children = h.children(last.as_str()).unwrap();
        if children.is_empty() || path.len() == MAX_DEPTH {
            out.insert(path);
            continue;
        }
        for c in children {
            if rank(c, children, scores) < budget[path.len()] {
                let mut next = path.clone();
                next.push(c.clone());
                stack.push(next);
            }
        }
    }
    out
}

struct FixedScorer(BTreeMap<CweId, f64>);

impl LinkScorer for FixedScorer {
    type Query = ();

    fn prepare(&self, _: &str) -> Result<()> {
        Ok(())
    }

    fn score(&self, _: &(), candidates: &[&CweId]) -> Result<Vec<LinkScore>> {
        Ok(candidates
            .iter()
            .map(|c| {
                let link = self.0[*c];
                LinkScore {
                    unlink: 1.0 - link,
                    link,
                }
            })
            .collect())
    }
}

fn triple() -> impl Strategy<Value = KTriple> {
    (1..=5usize, 1..=3usize, 1..=3usize).prop_map(|(a, b, c)| KTriple::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ancestors_match_fixpoint((n, edges) in dag(50)) {
        let h = build(n, &edges);
        let oracle = ancestor_fixpoint(n, &edges);
        for (i, want) in oracle.iter().enumerate() {
            let got: BTreeSet<CweId> = h.ancestors(id(i).as_str()).unwrap();
            let want: BTreeSet<CweId> = want.iter().map(|a| id(*a)).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn links_are_closure_and_balanced((n, edges) in dag(50), labels in proptest::collection::vec(0..50usize, 1..4), k_neg in 1..6usize, seed in any::<u64>()) {
        let h = build(n, &edges);
        let oracle = ancestor_fixpoint(n, &edges);
        let labels: BTreeSet<usize> = labels.into_iter().map(|l| l % n).collect();
        let record = CveRecord {
            id: "CVE-2020-0001".into(),
            description: "x".into(),
            year: 2020,
            labels: labels.iter().map(|l| id(*l)).collect(),
        };
        let u = TrainingCweSet::all(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lb = generate_links(std::slice::from_ref(&record), &h, &u, k_neg, &mut rng).unwrap();
        let closure: BTreeSet<CweId> = labels
            .iter()
            .flat_map(|l| oracle[*l].iter().copied().chain([*l]))
            .map(id)
            .collect();
        let pos: BTreeSet<CweId> = lb.positives.iter().map(|p| p.cwe.clone()).collect();
        prop_assert_eq!(lb.positives.len(), pos.len());
        prop_assert_eq!(&pos, &closure);
        let neg: BTreeSet<CweId> = lb.negatives.iter().map(|p| p.cwe.clone()).collect();
        prop_assert_eq!(neg.len(), lb.negatives.len());
        prop_assert!(neg.is_disjoint(&closure));
        prop_assert_eq!(neg.len() + lb.shortfall, k_neg);
        prop_assert_eq!(neg.len(), k_neg.min(n - closure.len()));
        if !lb.negatives.is_empty() {
            for mode in [BalanceMode::Repeat, BalanceMode::Weight] {
                let b = balance(&lb, mode).unwrap();
                prop_assert!((b.positive_weight() - b.negative_weight()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn paths_bounded_monotone_and_match_brute_force((n, edges) in dag(20), raw in proptest::collection::vec(any::<u8>(), 1..20), k in triple()) {
        let h = build(n, &edges);
        let scores = scores_for(&h, &raw);
        let paths = h.enumerate_paths(&scores, k).unwrap();
        prop_assert!(paths.len() <= k.k1 * k.k2 * k.k3);
        prop_assert_eq!(h.enumerate_paths(&scores, KTriple::PRECISE).unwrap().len(), 1);
        for p in &paths {
            prop_assert!((1..=MAX_DEPTH).contains(&p.nodes.len()));
            for w in p.nodes.windows(2) {
                prop_assert!(h.children(w[0].as_str()).unwrap().contains(&w[1]));
            }
            for (node, s) in p.nodes.iter().zip(&p.scores) {
                prop_assert_eq!(scores[node], *s);
            }
        }
        let got: BTreeSet<Vec<CweId>> = paths.iter().map(|p| p.nodes.clone()).collect();
        prop_assert_eq!(got.len(), paths.len());
        prop_assert_eq!(got, brute_force_paths(&h, &scores, k));
    }

    #[test]
    fn accuracy_matches_brute_force_and_grows_with_k((n, edges) in dag(20), raw in proptest::collection::vec(any::<u8>(), 1..20), truths in proptest::collection::vec(proptest::collection::btree_set(0..20usize, 0..3), 1..12)) {
        let h = build(n, &edges);
        let scores = scores_for(&h, &raw);
        let truth: Vec<BTreeSet<CweId>> = truths.iter().map(|t| t.iter().map(|i| id(i % n)).collect()).collect();
        let mut last = 0.0;
        for k in REPORT_TRIPLES {
            let paths = h.enumerate_paths(&scores, k).unwrap();
            let preds: Vec<Vec<PredictionPath>> = vec![paths; truth.len()];
            let acc = path_accuracy(&preds, &truth).unwrap();
            let on_path: BTreeSet<CweId> = brute_force_paths(&h, &scores, k).into_iter().flatten().collect();
            let labeled: Vec<&BTreeSet<CweId>> = truth.iter().filter(|t| !t.is_empty()).collect();
            let hits = labeled.iter().filter(|t| !t.is_disjoint(&on_path)).count();
            prop_assert_eq!(acc.evaluated, labeled.len());
            prop_assert_eq!(acc.correct, hits);
            prop_assert!(acc.accuracy >= last);
            last = acc.accuracy;
        }
    }

    #[test]
    fn novelty_is_monotone_in_beta(values in proptest::collection::vec(0.0..1.0f64, 1..30), b1 in 0.0..1.0f64, b2 in 0.0..1.0f64) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let scorer = FixedScorer(values.iter().enumerate().map(|(i, v)| (id(i), *v)).collect());
        let u = TrainingCweSet { ids: scorer.0.keys().cloned().collect(), held_out: BTreeSet::new() };
        let at_lo = detect_new_cwe(&scorer, &(), &u, lo).unwrap();
        let at_hi = detect_new_cwe(&scorer, &(), &u, hi).unwrap();
        if at_lo == Novelty::Novel {
            prop_assert_eq!(at_hi, Novelty::Novel);
        }
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(at_lo == Novelty::Novel, max < lo);
    }

    #[test]
    fn stratified_split_fractions(sizes in proptest::collection::vec(1..40usize, 1..8), seed in any::<u64>()) {
        let mut records = Vec::new();
        for (c, n) in sizes.iter().enumerate() {
            for j in 0..*n {
                records.push(CveRecord {
                    id: format!("CVE-2015-{:04}", c * 100 + j),
                    description: "d".into(),
                    year: 2015,
                    labels: [id(c)].into(),
                });
            }
        }
        let split = random_split(&records, seed);
        let val = split.validation.clone().unwrap();
        let all: Vec<&CveRecord> = split.train.iter().chain(&val).chain(&split.test1).collect();
        let ids: BTreeSet<&str> = all.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(ids.len(), records.len());
        prop_assert_eq!(all.len(), records.len());
        for (c, n) in sizes.iter().enumerate() {
            let count = |part: &[CveRecord]| part.iter().filter(|r| r.labels.contains(&id(c))).count() as f64;
            let n = *n as f64;
            prop_assert!((count(&split.train) - 0.7 * n).abs() <= 1.0);
            prop_assert!((count(&val) - 0.1 * n).abs() <= 1.0);
            prop_assert!((count(&split.test1) - 0.2 * n).abs() <= 1.0);
        }
    }

    #[test]
    fn masking_preserves_shape_and_skips_specials(words in proptest::collection::vec("[a-z]{1,8}", 1..40), max_len in 3..48usize, seed in any::<u64>()) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(&[text.as_str(), "abcdefghijklmnopqrstuvwxyz"], 60).unwrap();
        let seq = vocab.encode(&text, max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mask(&seq, vocab.len(), &mut rng);
        let again = mask(&seq, vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&m, &again);
        prop_assert_eq!(m.corrupted.ids.len(), seq.ids.len());
        prop_assert_eq!(&m.corrupted.attention_mask, &seq.attention_mask);
        for (pos, orig) in &m.targets {
            prop_assert!(![PAD_ID, CLS_ID, SEP_ID].contains(orig));
            prop_assert_eq!(seq.ids[*pos], *orig);
        }
        for (pos, (a, b)) in seq.ids.iter().zip(&m.corrupted.ids).enumerate() {
            if a != b {
                prop_assert!(m.targets.contains_key(&pos));
                prop_assert!(*b == MASK_ID || !Vocabulary::is_special(*b));
            }
        }
    }
}
