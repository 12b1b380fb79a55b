//! Hierarchical prediction and evaluation: path accuracy at (k₁,k₂,k₃),
//! link F1, training-count buckets, the random baseline and β-threshold
//! novelty detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{bucket_by_training_count, CveRecord};
use crate::error::{Error, Result};
use crate::hierarchy::{CweHierarchy, CweId, KTriple, PredictionPath, MAX_DEPTH};
use crate::link::{combine, LinkScore};
use crate::trainer::{positive_set, zero_shot_filter, LinkEncoder, TrainingCweSet};

/// Scores (CVE, CWE) pairs. `prepare` runs once per CVE text.
pub trait LinkScorer: Sync {
    type Query: Send + Sync;

    fn prepare(&self, text: &str) -> Result<Self::Query>;
    fn score(&self, query: &Self::Query, candidates: &[&CweId]) -> Result<Vec<LinkScore>>;
}

/// Scorer over any [`LinkEncoder`], with every CWE description encoded once
/// up front.
pub struct EncoderScorer<'e, E: LinkEncoder> {
    enc: &'e E,
    cwe_vectors: BTreeMap<CweId, Vec<f64>>,
}

impl<'e, E: LinkEncoder> EncoderScorer<'e, E> {
    pub fn new(enc: &'e E, h: &CweHierarchy) -> Result<Self> {
        let nodes: Vec<(&CweId, &str)> =
            h.nodes().map(|n| (&n.id, n.description.as_str())).collect();
        let vectors: Vec<Vec<f64>> = nodes
            .par_iter()
            .map(|(_, d)| enc.embed(&enc.prepare(d)))
            .collect::<Result<_>>()?;
        Ok(EncoderScorer {
            enc,
            cwe_vectors: nodes
                .iter()
                .map(|(id, _)| (*id).clone())
                .zip(vectors)
                .collect(),
        })
    }
}

impl<E: LinkEncoder> LinkScorer for EncoderScorer<'_, E> {
    type Query = Vec<f64>;

    fn prepare(&self, text: &str) -> Result<Vec<f64>> {
        self.enc.embed(&self.enc.prepare(text))
    }

    fn score(&self, query: &Vec<f64>, candidates: &[&CweId]) -> Result<Vec<LinkScore>> {
        let head = self.enc.head();
        candidates
            .iter()
            .map(|c| {
                let y = self
                    .cwe_vectors
                    .get(*c)
                    .ok_or_else(|| Error::UnknownCwe(c.to_string()))?;
                head.classify(self.enc.store(), &combine(query, y, head.kind)?)
            })
            .collect()
    }
}

/// Link scores of one CVE against `candidates`.
pub fn score_all<S: LinkScorer>(
    scorer: &S,
    cve_text: &str,
    candidates: &BTreeSet<CweId>,
) -> Result<BTreeMap<CweId, LinkScore>> {
    let q = scorer.prepare(cve_text)?;
    let ids: Vec<&CweId> = candidates.iter().collect();
    let scores = scorer.score(&q, &ids)?;
    Ok(ids.into_iter().cloned().zip(scores).collect())
}

/// Link value of every hierarchy node for one prepared query.
fn link_values<S: LinkScorer>(
    scorer: &S,
    q: &S::Query,
    h: &CweHierarchy,
) -> Result<BTreeMap<CweId, f64>> {
    let ids: Vec<&CweId> = h.ids().collect();
    let scores = scorer.score(q, &ids)?;
    Ok(ids
        .into_iter()
        .cloned()
        .zip(scores.into_iter().map(|s| s.link))
        .collect())
}

/// Greedy top-k descent over link values.
pub fn predict_paths<S: LinkScorer>(
    scorer: &S,
    cve_text: &str,
    h: &CweHierarchy,
    k: KTriple,
) -> Result<Vec<PredictionPath>> {
    let q = scorer.prepare(cve_text)?;
    h.enumerate_paths(&link_values(scorer, &q, h)?, k)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// CVEs without labels, left out of the denominator.
    pub excluded: usize,
}

/// A CVE is correct when any of its true CWEs lies anywhere on any of its
/// predicted paths.
pub fn path_accuracy(
    predictions: &[Vec<PredictionPath>],
    truth: &[BTreeSet<CweId>],
) -> Result<Accuracy> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth sets",
            predictions.len(),
            truth.len()
        )));
    }
    let mut acc = Accuracy::default();
    for (paths, t) in predictions.iter().zip(truth) {
        if t.is_empty() {
            acc.excluded += 1;
            continue;
        }
        acc.evaluated += 1;
        if paths
            .iter()
            .any(|p| t.iter().any(|id| p.contains(id.as_str())))
        {
            acc.correct += 1;
        }
    }
    acc.accuracy = if acc.evaluated == 0 {
        0.0
    } else {
        acc.correct as f64 / acc.evaluated as f64
    };
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkF1 {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// F1 of the link class, `2TP / (2TP + FP + FN)`; zero when nothing is
/// predicted as a link.
pub fn f1_from_confusion(tp: usize, fp: usize, fn_: usize) -> LinkF1 {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    if tp + fp == 0 {
        log::warn!("no predicted links; F1 is 0");
    }
    LinkF1 {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        fn_,
    }
}

/// F1 over every (CVE, CWE ∈ u) pair, gold being the CVE's positive
/// closure.
pub fn link_f1<S: LinkScorer>(
    scorer: &S,
    test: &[CveRecord],
    h: &CweHierarchy,
    u: &TrainingCweSet,
) -> Result<LinkF1> {
    let candidates: Vec<&CweId> = u.ids.iter().collect();
    let counts: Vec<(usize, usize, usize)> = test
        .par_iter()
        .filter(|r| r.is_labeled())
        .map(|r| {
            let gold = positive_set(r, h)?;
            let q = scorer.prepare(&r.description)?;
            let scores = scorer.score(&q, &candidates)?;
            Ok(confusion(&candidates, &scores, &gold))
        })
        .collect::<Result<_>>()?;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(f1_from_confusion(tp, fp, fn_))
}

fn confusion(
    candidates: &[&CweId],
    scores: &[LinkScore],
    gold: &BTreeSet<CweId>,
) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (id, s) in candidates.iter().zip(scores) {
        match (s.is_link(), gold.contains(*id)) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    c
}

/// Truth sets with weights, e.g. one entry per test CVE.
pub type TruthDistribution = Vec<(BTreeSet<CweId>, f64)>;

/// Uniform weights over the label sets of `records` (unlabeled skipped).
pub fn truth_distribution(records: &[CveRecord]) -> TruthDistribution {
    records
        .iter()
        .filter(|r| r.is_labeled())
        .map(|r| (r.labels.clone(), 1.0))
        .collect()
}

/// One truth set per node, equally weighted.
pub fn uniform_node_truth(h: &CweHierarchy) -> TruthDistribution {
    h.ids()
        .map(|id| (BTreeSet::from([id.clone()]), 1.0))
        .collect()
}

/// `E[Π_{i∈S} x_i]` over uniform `k`-subsets `S` of `x`, via elementary
/// symmetric polynomials.
fn mean_subset_product(x: &[f64], k: usize) -> f64 {
    let k = k.min(x.len());
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for v in x {
        for j in (1..=k).rev() {
            e[j] += e[j - 1] * v;
        }
    }
    let mut binom = 1.0;
    for i in 0..k {
        binom = binom * (x.len() - i) as f64 / (i + 1) as f64;
    }
    e[k] / binom
}

/// Probability that a uniformly random top-k selection places some node of
/// `target` on a path through `node`, given `node` was selected at `depth`.
fn hit_probability(
    h: &CweHierarchy,
    node: &CweId,
    depth: usize,
    k: &[usize; 3],
    target: &BTreeSet<CweId>,
) -> f64 {
    if target.contains(node) {
        return 1.0;
    }
    let children = &h.node(node.as_str()).expect("node exists").children;
    if depth == MAX_DEPTH || children.is_empty() {
        return 0.0;
    }
    let miss: Vec<f64> = children
        .iter()
        .map(|c| 1.0 - hit_probability(h, c, depth + 1, k, target))
        .collect();
    1.0 - mean_subset_product(&miss, k[depth])
}

/// Exact expected accuracy of uniformly random selection: `k₁` level-1
/// nodes, then independently for every selected node `k₂` (then `k₃`) of its
/// children.
pub fn random_baseline_exact(
    h: &CweHierarchy,
    k: KTriple,
    truth: &TruthDistribution,
) -> Result<f64> {
    let (total_w, level1) = baseline_inputs(h, k, truth)?;
    let ks = k.as_array();
    let acc: f64 = truth
        .iter()
        .map(|(t, w)| {
            let miss: Vec<f64> = level1
                .iter()
                .map(|v| 1.0 - hit_probability(h, v, 1, &ks, t))
                .collect();
            w * (1.0 - mean_subset_product(&miss, ks[0]))
        })
        .sum();
    Ok(acc / total_w)
}

fn baseline_inputs(
    h: &CweHierarchy,
    k: KTriple,
    truth: &TruthDistribution,
) -> Result<(f64, Vec<CweId>)> {
    if k.as_array().contains(&0) {
        return Err(Error::InvalidArgument("k values must be at least 1".into()));
    }
    let total_w: f64 = truth.iter().map(|(_, w)| w).sum();
    if truth.is_empty() || total_w <= 0.0 {
        return Err(Error::InvalidArgument("empty truth distribution".into()));
    }
    Ok((total_w, h.nodes_at_level(1)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Monte-Carlo estimate of [`random_baseline_exact`].
pub fn random_baseline_monte_carlo(
    h: &CweHierarchy,
    k: KTriple,
    truth: &TruthDistribution,
    trials: usize,
    seed: u64,
) -> Result<MonteCarlo> {
    let (total_w, level1) = baseline_inputs(h, k, truth)?;
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least two trials".into()));
    }
    let ks = k.as_array();
    const CHUNK: usize = 1 << 14;
    let chunks = trials.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = CHUNK.min(trials - c * CHUNK);
            let mut s = (0.0, 0.0);
            let mut on_path = BTreeSet::new();
            for _ in 0..n {
                on_path.clear();
                for i in index::sample(&mut rng, level1.len(), ks[0].min(level1.len())) {
                    random_descent(h, &level1[i], 1, &ks, &mut rng, &mut on_path);
                }
                let v: f64 = truth
                    .iter()
                    .filter(|(t, _)| t.iter().any(|id| on_path.contains(id)))
                    .map(|(_, w)| w)
                    .sum::<f64>()
                    / total_w;
                s.0 += v;
                s.1 += v * v;
            }
            s
        })
        .collect();
    let (sum, sq) = sums.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0, a.1 + s.1));
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(MonteCarlo {
        mean,
        std_error: (var / n).sqrt(),
        trials,
        seed,
    })
}

fn random_descent<'h>(
    h: &'h CweHierarchy,
    node: &'h CweId,
    depth: usize,
    k: &[usize; 3],
    rng: &mut ChaCha8Rng,
    on_path: &mut BTreeSet<&'h CweId>,
) {
    on_path.insert(node);
    let children = &h.node(node.as_str()).expect("node exists").children;
    if depth == MAX_DEPTH || children.is_empty() {
        return;
    }
    let list: Vec<&CweId> = children.iter().collect();
    for i in index::sample(rng, list.len(), k[depth].min(list.len())) {
        random_descent(h, list[i], depth + 1, k, rng, on_path);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Novelty {
    Known,
    Novel,
}

/// Novel when every link value over `u` is below `beta`.
pub fn detect_new_cwe<S: LinkScorer>(
    scorer: &S,
    query: &S::Query,
    u: &TrainingCweSet,
    beta: f64,
) -> Result<Novelty> {
    let ids: Vec<&CweId> = u.ids.iter().collect();
    let best = scorer
        .score(query, &ids)?
        .iter()
        .map(|s| s.link)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(if best < beta {
        Novelty::Novel
    } else {
        Novelty::Known
    })
}

pub const DEFAULT_BETA: f64 = 0.90;
pub const MONTE_CARLO_TRIALS: usize = 1_000_000;

pub const REPORT_TRIPLES: [KTriple; 3] = [KTriple::PRECISE, KTriple::MODERATE, KTriple::RELAXED];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub count: usize,
    pub accuracy: BTreeMap<String, f64>,
    pub novel_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub evaluated: usize,
    pub excluded_unlabeled: usize,
    /// Keyed by `k1,k2,k3`.
    pub accuracy: BTreeMap<String, f64>,
    pub buckets: BTreeMap<String, BucketReport>,
    pub link_f1: LinkF1,
    /// Fraction of each label's CVEs whose label lies on the precise path.
    pub per_label_recall: BTreeMap<CweId, f64>,
    pub random_baseline: BTreeMap<String, f64>,
    pub monte_carlo_seed: u64,
    pub beta: f64,
    pub novel_rate: f64,
}

/// Per-CVE outputs shared by every metric.
struct CveEval {
    paths: Vec<Vec<PredictionPath>>,
    confusion: (usize, usize, usize),
    novel: bool,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub protocol: String,
    pub beta: f64,
    pub monte_carlo_seed: u64,
    /// Exact random baseline over the test truth distribution.
    pub random_baseline: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            protocol: "custom".into(),
            beta: DEFAULT_BETA,
            monte_carlo_seed: 0,
            random_baseline: true,
        }
    }
}

/// Scores every test CVE once and derives accuracies at the three reporting
/// triples, bucket accuracies (against `train` counts), link F1 over `u`,
/// novelty rates and the random baseline.
pub fn evaluate<S: LinkScorer>(
    scorer: &S,
    train: &[CveRecord],
    test: &[CveRecord],
    h: &CweHierarchy,
    u: &TrainingCweSet,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let labeled: Vec<&CveRecord> = test.iter().filter(|r| r.is_labeled()).collect();
    let u_ids: Vec<&CweId> = u.ids.iter().collect();
    let per_cve: Vec<CveEval> = labeled
        .par_iter()
        .map(|r| {
            let q = scorer.prepare(&r.description)?;
            let values = link_values(scorer, &q, h)?;
            let paths = REPORT_TRIPLES
                .iter()
                .map(|k| h.enumerate_paths(&values, *k))
                .collect::<Result<_>>()?;
            let gold = positive_set(r, h)?;
            let u_scores: Vec<LinkScore> = u_ids
                .iter()
                .map(|id| {
                    let link = values[*id];
                    LinkScore {
                        unlink: 1.0 - link,
                        link,
                    }
                })
                .collect();
            let best = u_scores
                .iter()
                .map(|s| s.link)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(CveEval {
                paths,
                confusion: confusion(&u_ids, &u_scores, &gold),
                novel: best < opts.beta,
            })
        })
        .collect::<Result<_>>()?;

    let truth: Vec<BTreeSet<CweId>> = labeled.iter().map(|r| r.labels.clone()).collect();
    let mut report = EvalReport {
        protocol: opts.protocol.clone(),
        evaluated: labeled.len(),
        excluded_unlabeled: test.len() - labeled.len(),
        monte_carlo_seed: opts.monte_carlo_seed,
        beta: opts.beta,
        ..EvalReport::default()
    };
    for (ti, k) in REPORT_TRIPLES.iter().enumerate() {
        let preds: Vec<Vec<PredictionPath>> = per_cve.iter().map(|c| c.paths[ti].clone()).collect();
        report
            .accuracy
            .insert(k.to_string(), path_accuracy(&preds, &truth)?.accuracy);
    }
    let (tp, fp, fn_) = per_cve.iter().fold((0, 0, 0), |a, c| {
        (
            a.0 + c.confusion.0,
            a.1 + c.confusion.1,
            a.2 + c.confusion.2,
        )
    });
    report.link_f1 = f1_from_confusion(tp, fp, fn_);
    report.novel_rate = rate(per_cve.iter().map(|c| c.novel));

    let mut label_hits: BTreeMap<CweId, (usize, usize)> = BTreeMap::new();
    for (c, t) in per_cve.iter().zip(&truth) {
        for l in t {
            let e = label_hits.entry(l.clone()).or_default();
            e.1 += 1;
            if c.paths[0].iter().any(|p| p.contains(l.as_str())) {
                e.0 += 1;
            }
        }
    }
    report.per_label_recall = label_hits
        .into_iter()
        .map(|(l, (hit, n))| (l, hit as f64 / n as f64))
        .collect();

    let position: BTreeMap<&str, usize> = labeled
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let owned: Vec<CveRecord> = labeled.iter().map(|r| (*r).clone()).collect();
    for (bucket, members) in bucket_by_training_count(train, &owned, h) {
        let idx: Vec<usize> = members.iter().map(|r| position[r.id.as_str()]).collect();
        let mut b = BucketReport {
            count: idx.len(),
            novel_rate: rate(idx.iter().map(|i| per_cve[*i].novel)),
            ..BucketReport::default()
        };
        for (ti, k) in REPORT_TRIPLES.iter().enumerate() {
            let preds: Vec<Vec<PredictionPath>> =
                idx.iter().map(|i| per_cve[*i].paths[ti].clone()).collect();
            let t: Vec<BTreeSet<CweId>> = idx.iter().map(|i| truth[*i].clone()).collect();
            b.accuracy
                .insert(k.to_string(), path_accuracy(&preds, &t)?.accuracy);
        }
        report.buckets.insert(bucket.label().to_string(), b);
    }

    if opts.random_baseline && !labeled.is_empty() {
        let dist = truth_distribution(&owned);
        for k in REPORT_TRIPLES {
            report
                .random_baseline
                .insert(k.to_string(), random_baseline_exact(h, k, &dist)?);
        }
    }
    Ok(report)
}

/// Training and test sets for a zero-shot run over `held_out`.
#[derive(Clone, Debug)]
pub struct ZeroShotSetup {
    /// Training CVEs with no label in the held-out family.
    pub train: Vec<CveRecord>,
    pub removed: usize,
    /// Test CVEs with at least one held-out label.
    pub test: Vec<CveRecord>,
    /// CWEs the model may see during training.
    pub seen: TrainingCweSet,
}

pub fn zero_shot_protocol(
    train: &[CveRecord],
    test: &[CveRecord],
    h: &CweHierarchy,
    held_out: &BTreeSet<CweId>,
) -> Result<ZeroShotSetup> {
    if held_out.is_empty() {
        return Err(Error::InvalidArgument(
            "zero-shot protocol needs at least one held-out CWE".into(),
        ));
    }
    let seen = TrainingCweSet::excluding(h, held_out)?;
    let (train, removed) = zero_shot_filter(train, h, held_out)?;
    let test = test
        .iter()
        .filter(|r| r.labels.iter().any(|l| held_out.contains(l)))
        .cloned()
        .collect();
    Ok(ZeroShotSetup {
        train,
        removed,
        test,
        seen,
    })
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        hit += f as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let triples: Vec<String> = REPORT_TRIPLES.iter().map(|k| k.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "protocol: {}  evaluated: {}  unlabeled: {}",
            self.protocol, self.evaluated, self.excluded_unlabeled
        );
        let _ = write!(s, "{:<12}{:>7}", "subset", "n");
        for t in &triples {
            let _ = write!(s, "{t:>10}");
        }
        let _ = writeln!(s, "{:>8}", "novel");
        let row = |s: &mut String,
                   name: &str,
                   n: usize,
                   acc: &BTreeMap<String, f64>,
                   novel: Option<f64>| {
            let _ = write!(s, "{name:<12}{n:>7}");
            for t in &triples {
                let _ = write!(s, "{:>10.4}", acc.get(t).copied().unwrap_or(0.0));
            }
            match novel {
                Some(v) => writeln!(s, "{v:>8.4}"),
                None => writeln!(s, "{:>8}", "-"),
            }
            .ok();
        };
        row(
            &mut s,
            "all",
            self.evaluated,
            &self.accuracy,
            Some(self.novel_rate),
        );
        for b in crate::corpus::Bucket::ALL {
            if let Some(r) = self.buckets.get(b.label()).filter(|r| r.count > 0) {
                row(&mut s, b.label(), r.count, &r.accuracy, Some(r.novel_rate));
            }
        }
        if !self.random_baseline.is_empty() {
            row(
                &mut s,
                "random",
                self.evaluated,
                &self.random_baseline,
                None,
            );
        }
        let f = &self.link_f1;
        let _ = writeln!(
            s,
            "link F1 {:.4} (precision {:.4}, recall {:.4}; tp {} fp {} fn {})",
            f.f1, f.precision, f.recall, f.tp, f.fp, f.fn_
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::CweDefinition;

    fn hier(ids: &[&str], edges: &[(&str, &str)]) -> CweHierarchy {
        let defs = ids
            .iter()
            .map(|i| CweDefinition {
                id: CweId::new(*i),
                name: i.to_string(),
                description: format!("d {i}"),
            })
            .collect();
        CweHierarchy::from_parts(
            defs,
            edges.iter().map(|(c, p)| (CweId::new(*c), CweId::new(*p))),
        )
        .unwrap()
    }

    fn path(ids: &[&str]) -> PredictionPath {
        PredictionPath {
            nodes: ids.iter().map(|i| CweId::new(*i)).collect(),
            scores: vec![1.0; ids.len()],
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<CweId> {
        ids.iter().map(|i| CweId::new(*i)).collect()
    }

    #[test]
    fn accuracy_membership_rule() {
        let p = vec![
            vec![path(&["A", "B", "C"])],
            vec![path(&["A", "B", "C"])],
            vec![path(&["D"])],
            vec![path(&["A"]), path(&["D", "E"])],
            vec![path(&["A"])],
        ];
        let t = vec![set(&["B"]), set(&["X"]), set(&["Y"]), set(&["E"]), set(&[])];
        let a = path_accuracy(&p, &t).unwrap();
        assert_eq!((a.correct, a.evaluated, a.excluded), (2, 4, 1));
        assert_eq!(a.accuracy, 0.5);
    }

    #[test]
    fn f1_closed_forms() {
        assert_eq!(f1_from_confusion(8, 2, 2).f1, 0.8);
        assert_eq!(f1_from_confusion(5, 0, 0).f1, 1.0);
        assert_eq!(f1_from_confusion(0, 0, 7).f1, 0.0);
    }

    #[test]
    fn subset_product_mean() {
        // k=2 of (a,b,c): (ab+ac+bc)/3.
        let (a, b, c) = (0.5, 0.25, 0.8);
        let want = (a * b + a * c + b * c) / 3.0;
        assert!((mean_subset_product(&[a, b, c], 2) - want).abs() < 1e-15);
        assert_eq!(mean_subset_product(&[a, b], 5), a * b);
    }

    #[test]
    fn chain_baseline_is_one() {
        let h = hier(&["A", "B", "C"], &[("B", "A"), ("C", "B")]);
        for k in REPORT_TRIPLES {
            assert_eq!(
                random_baseline_exact(&h, k, &uniform_node_truth(&h)).unwrap(),
                1.0
            );
        }
    }

    #[test]
    fn two_roots_by_hand() {
        // Roots A, B; A has children C, D. Truth C: pick A (1/2) then C (1/2).
        let h = hier(&["A", "B", "C", "D"], &[("C", "A"), ("D", "A")]);
        let t = vec![(set(&["C"]), 1.0)];
        assert!((random_baseline_exact(&h, KTriple::PRECISE, &t).unwrap() - 0.25).abs() < 1e-15);
        assert!(
            (random_baseline_exact(&h, KTriple::new(2, 1, 1), &t).unwrap() - 0.5).abs() < 1e-15
        );
        assert!(
            (random_baseline_exact(&h, KTriple::new(2, 2, 1), &t).unwrap() - 1.0).abs() < 1e-15
        );
        let mc = random_baseline_monte_carlo(&h, KTriple::PRECISE, &t, 100_000, 3).unwrap();
        assert!((mc.mean - 0.25).abs() < 4.0 * mc.std_error);
    }
}
