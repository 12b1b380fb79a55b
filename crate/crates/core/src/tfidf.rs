//! TF-IDF baselines: a link model whose encoder is a trainable projection
//! of TF-IDF vectors, and a flat one-hidden-layer classifier over the
//! training CWEs.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseRow, Tape, Var};
use crate::checkpoint::{Checkpoint, KIND_TFIDF_CLASS, KIND_TFIDF_LINK};
use crate::corpus::CveRecord;
use crate::encoder::{apply_dropout, INIT_STD};
use crate::error::{Error, Result};
use crate::eval::LinkScorer;
use crate::hierarchy::{CweHierarchy, CweId};
use crate::link::{CombinationKind, LinkHead, LinkScore};
use crate::optim::{clip_global_norm, AdamW, Schedule};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tokenizer::{pre_tokenize, BOUNDARY};
use crate::trainer::{batches_per_epoch, epoch_order, LinkEncoder, TrainConfig, PURPOSE_CLASS};

pub const CLASS_HIDDEN: usize = 256;

/// Lowercased alphanumeric words.
pub fn terms(text: &str) -> Vec<String> {
    pre_tokenize(text)
        .into_iter()
        .map(|p| p.trim_start_matches(BOUNDARY).to_string())
        .filter(|p| p.chars().next().is_some_and(char::is_alphanumeric))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfidfVectorizer {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
}

impl TfidfVectorizer {
    /// Raw-count tf, smoothed `idf = ln((1 + D) / (1 + df)) + 1`. Term
    /// indices follow lexicographic order.
    pub fn fit<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit TF-IDF on an empty corpus".into(),
            ));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            let unique: BTreeSet<String> = terms(t.as_ref()).into_iter().collect();
            for term in unique {
                *df.entry(term).or_default() += 1;
            }
        }
        let d = texts.len() as f64;
        let idf = df
            .values()
            .map(|n| ((1.0 + d) / (1.0 + *n as f64)).ln() + 1.0)
            .collect();
        let vocabulary = df.into_keys().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(TfidfVectorizer { vocabulary, idf })
    }

    pub fn len(&self) -> usize {
        self.idf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idf.is_empty()
    }

    /// L2-normalized sparse vector; unseen terms are ignored, so a fully
    /// unseen text maps to the empty (zero) vector.
    pub fn transform(&self, text: &str) -> SparseRow {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms(text) {
            if let Some(&i) = self.vocabulary.get(&t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut row: SparseRow = counts
            .into_iter()
            .map(|(i, c)| (i, c * self.idf[i]))
            .collect();
        let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|(_, v)| *v /= norm);
        }
        row
    }

    pub fn fit_transform<S: AsRef<str>>(texts: &[S]) -> Result<(Self, Vec<SparseRow>)> {
        let v = Self::fit(texts)?;
        let rows = texts.iter().map(|t| v.transform(t.as_ref())).collect();
        Ok((v, rows))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfidfLinkConfig {
    pub hidden: usize,
    pub combination: CombinationKind,
    pub dropout: f64,
}

impl Default for TfidfLinkConfig {
    fn default() -> Self {
        TfidfLinkConfig {
            hidden: 128,
            combination: CombinationKind::AbsDiffMul,
            dropout: 0.1,
        }
    }
}

/// Link model over `tanh(tfidf · W + b)` representations.
#[derive(Clone, Debug)]
pub struct TfidfLinkModel {
    pub config: TfidfLinkConfig,
    pub vectorizer: TfidfVectorizer,
    store: ParamStore,
    projection: ParamId,
    projection_bias: ParamId,
    head: LinkHead,
}

impl TfidfLinkModel {
    /// Fits the vectorizer on `texts` (CVE and CWE descriptions).
    pub fn new<S: AsRef<str>>(config: TfidfLinkConfig, texts: &[S], seed: u64) -> Result<Self> {
        if config.hidden == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(
                "hidden must be positive, dropout in [0, 1)".into(),
            ));
        }
        Ok(Self::with_vectorizer(
            config,
            TfidfVectorizer::fit(texts)?,
            seed,
        ))
    }

    fn with_vectorizer(config: TfidfLinkConfig, vectorizer: TfidfVectorizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let projection = store.add_normal(
            "tfidf.projection.weight",
            vectorizer.len(),
            config.hidden,
            INIT_STD,
            &mut rng,
        );
        let projection_bias = store.add_constant("tfidf.projection.bias", 1, config.hidden, 0.0);
        let head = LinkHead::init(&mut store, config.combination, config.hidden, &mut rng);
        TfidfLinkModel {
            config,
            vectorizer,
            store,
            projection,
            projection_bias,
            head,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(LinkRecord {
            model: self.config.clone(),
            vectorizer: self.vectorizer.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint::from_store(KIND_TFIDF_LINK, config, &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_TFIDF_LINK)?;
        let rec: LinkRecord = ck.config_as()?;
        let mut m = Self::with_vectorizer(rec.model, rec.vectorizer, 0);
        m.store.load_values(&ck.tensors)?;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct LinkRecord {
    model: TfidfLinkConfig,
    vectorizer: TfidfVectorizer,
}

#[derive(Serialize, Deserialize)]
struct ClassRecord {
    hidden: usize,
    classes: Vec<CweId>,
    vectorizer: TfidfVectorizer,
}

impl LinkEncoder for TfidfLinkModel {
    type Input = SparseRow;

    fn prepare(&self, text: &str) -> SparseRow {
        self.vectorizer.transform(text)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn head(&self) -> &LinkHead {
        &self.head
    }

    fn supports_rd(&self) -> bool {
        false
    }

    fn pass<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &SparseRow,
        _rd: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<Var>)> {
        let z = tape.sparse_linear(
            vec![input.clone()],
            self.projection,
            Some(self.projection_bias),
        );
        let z = tape.tanh(z);
        Ok((apply_dropout(tape, z, self.config.dropout, rng), None))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub epoch_loss: Vec<f64>,
    pub examples: usize,
}

/// One-hidden-layer classifier from TF-IDF to a softmax over the training
/// CWEs.
#[derive(Clone, Debug)]
pub struct TfidfClassifier {
    pub vectorizer: TfidfVectorizer,
    pub classes: Vec<CweId>,
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl TfidfClassifier {
    /// Output space: every in-hierarchy label of `train`.
    pub fn new(train: &[CveRecord], h: &CweHierarchy, hidden: usize, seed: u64) -> Result<Self> {
        let classes: Vec<CweId> = train
            .iter()
            .flat_map(|r| r.labels.iter())
            .filter(|l| h.contains(l.as_str()))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if classes.is_empty() || hidden == 0 {
            return Err(Error::InvalidArgument(
                "classifier needs labeled training data and a hidden layer".into(),
            ));
        }
        let texts: Vec<&str> = train.iter().map(|r| r.description.as_str()).collect();
        Ok(Self::with_parts(
            TfidfVectorizer::fit(&texts)?,
            classes,
            hidden,
            seed,
        ))
    }

    fn with_parts(
        vectorizer: TfidfVectorizer,
        classes: Vec<CweId>,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w1 = store.add_normal(
            "class.hidden.weight",
            vectorizer.len(),
            hidden,
            INIT_STD,
            &mut rng,
        );
        let b1 = store.add_constant("class.hidden.bias", 1, hidden, 0.0);
        let w2 = store.add_normal(
            "class.output.weight",
            hidden,
            classes.len(),
            INIT_STD,
            &mut rng,
        );
        let b2 = store.add_constant("class.output.bias", 1, classes.len(), 0.0);
        TfidfClassifier {
            vectorizer,
            classes,
            store,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn hidden(&self) -> usize {
        self.store.value(self.b1).cols
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(ClassRecord {
            hidden: self.hidden(),
            classes: self.classes.clone(),
            vectorizer: self.vectorizer.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint::from_store(
            KIND_TFIDF_CLASS,
            config,
            &self.store,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_TFIDF_CLASS)?;
        let rec: ClassRecord = ck.config_as()?;
        if rec.classes.is_empty() || rec.hidden == 0 {
            return Err(Error::Checkpoint("empty classifier".into()));
        }
        let mut m = Self::with_parts(rec.vectorizer, rec.classes, rec.hidden, 0);
        m.store.load_values(&ck.tensors)?;
        Ok(m)
    }

    fn logits_tape(&self, tape: &mut Tape<'_>, rows: Vec<SparseRow>) -> Var {
        let z = tape.sparse_linear(rows, self.w1, Some(self.b1));
        let z = tape.relu(z);
        tape.linear(z, self.w2, Some(self.b2))
    }

    /// Softmax over [`Self::classes`].
    pub fn predict_proba(&self, text: &str) -> Vec<f64> {
        let mut tape = Tape::new(&self.store);
        let logits = self.logits_tape(&mut tape, vec![self.vectorizer.transform(text)]);
        let row = &tape.value(logits).data;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / sum).collect()
    }

    /// Mean cross-entropy training; a record with several labels contributes
    /// one example per label, each weighted by the inverse label count.
    pub fn train(&mut self, train: &[CveRecord], cfg: &TrainConfig) -> Result<ClassSummary> {
        cfg.validate()?;
        let index: BTreeMap<&CweId, usize> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        let mut examples: Vec<(SparseRow, usize, f64)> = Vec::new();
        for r in train {
            let ls: Vec<usize> = r
                .labels
                .iter()
                .filter_map(|l| index.get(l).copied())
                .collect();
            let x = self.vectorizer.transform(&r.description);
            for l in &ls {
                examples.push((x.clone(), *l, 1.0 / ls.len() as f64));
            }
        }
        let mut summary = ClassSummary {
            epoch_loss: Vec::new(),
            examples: examples.len(),
        };
        if examples.is_empty() {
            return Ok(summary);
        }
        let per_epoch = batches_per_epoch(examples.len(), cfg.link_batch_size);
        let mut opt = AdamW::new(
            Schedule::new(cfg.link_lr, cfg.warmup_frac, per_epoch * cfg.epochs_link),
            cfg.weight_decay,
        );
        for epoch in 0..cfg.epochs_link {
            let order = epoch_order(examples.len(), cfg.seed, PURPOSE_CLASS, epoch);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.link_batch_size) {
                let total_w: f64 = chunk.iter().map(|i| examples[*i].2).sum();
                let mut tape = Tape::new(&self.store);
                let rows = chunk.iter().map(|i| examples[*i].0.clone()).collect();
                let logits = self.logits_tape(&mut tape, rows);
                let targets: Vec<usize> = chunk.iter().map(|i| examples[*i].1).collect();
                let weights: Vec<f64> = chunk.iter().map(|i| examples[*i].2 / total_w).collect();
                let loss = tape.cross_entropy(logits, &targets, &weights);
                let value = tape.value(loss).data[0];
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        step: opt.steps(),
                        loss: value,
                    });
                }
                let mut grads: Gradients = tape.backward(loss).params;
                clip_global_norm(&mut grads, cfg.clip_norm);
                opt.step(&mut self.store, &grads);
                sum += value;
            }
            summary.epoch_loss.push(sum / per_epoch as f64);
        }
        Ok(summary)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Scores a candidate CWE by the class probability mass of its subtree
/// (itself and every descendant in the output space).
pub struct ClassScorer<'c> {
    model: &'c TfidfClassifier,
    subtree: BTreeMap<CweId, Vec<usize>>,
}

impl<'c> ClassScorer<'c> {
    pub fn new(model: &'c TfidfClassifier, h: &CweHierarchy) -> Result<Self> {
        let index: BTreeMap<&CweId, usize> = model
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        let mut subtree = BTreeMap::new();
        for id in h.ids() {
            let mut members: Vec<usize> = h
                .descendants(id.as_str())?
                .iter()
                .chain([id])
                .filter_map(|d| index.get(d).copied())
                .collect();
            members.sort_unstable();
            subtree.insert(id.clone(), members);
        }
        Ok(ClassScorer { model, subtree })
    }
}

impl LinkScorer for ClassScorer<'_> {
    type Query = Vec<f64>;

    fn prepare(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.model.predict_proba(text))
    }

    fn score(&self, query: &Vec<f64>, candidates: &[&CweId]) -> Result<Vec<LinkScore>> {
        candidates
            .iter()
            .map(|c| {
                let members = self
                    .subtree
                    .get(*c)
                    .ok_or_else(|| Error::UnknownCwe(c.to_string()))?;
                let link = members.iter().map(|i| query[*i]).sum::<f64>().min(1.0);
                Ok(LinkScore {
                    unlink: 1.0 - link,
                    link,
                })
            })
            .collect()
    }
}

/// Link-baseline texts: every CVE description plus every CWE description.
pub fn link_corpus(records: &[CveRecord], h: &CweHierarchy) -> Vec<String> {
    records
        .iter()
        .map(|r| r.description.clone())
        .chain(h.nodes().map(|n| n.description.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_idf_closed_forms() {
        let v = TfidfVectorizer::fit(&["sql injection", "sql overflow"]).unwrap();
        assert_eq!(v.idf[v.vocabulary["sql"]], 1.0);
        let rare = (3.0f64 / 2.0).ln() + 1.0;
        assert_eq!(v.idf[v.vocabulary["overflow"]], rare);
        assert!(TfidfVectorizer::fit::<&str>(&[]).is_err());
    }

    #[test]
    fn two_document_vectors_by_hand() {
        // Terms: a(df 2), b(df 1), c(df 1). Doc "a a b": tf a=2, b=1.
        let v = TfidfVectorizer::fit(&["a a b", "a c"]).unwrap();
        let idf_b = (3.0f64 / 2.0).ln() + 1.0;
        let (wa, wb) = (2.0, idf_b);
        let n = (wa * wa + wb * wb).sqrt();
        let row = v.transform("a a b");
        assert_eq!(row, vec![(0, wa / n), (1, wb / n)]);
        assert!(v.transform("zzz unseen").is_empty());
        let norm: f64 = v.transform("c a").iter().map(|(_, x)| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn terms_drop_punctuation() {
        assert_eq!(
            terms("Heap-based overflow, in X."),
            vec!["heap", "based", "overflow", "in", "x"]
        );
    }

    fn tiny() -> (crate::synth::SynthCorpus, TrainConfig) {
        let corpus = crate::synth::generate(&crate::synth::SynthConfig {
            cves: 60,
            ..crate::synth::SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs_link: 3,
            link_batch_size: 16,
            ..TrainConfig::default()
        };
        (corpus, cfg)
    }

    #[test]
    fn classifier_distribution_and_output_space() {
        let (c, cfg) = tiny();
        let held = c.records[0].labels.iter().next().unwrap().clone();
        let train: Vec<CveRecord> = c
            .records
            .iter()
            .filter(|r| !r.labels.contains(&held))
            .cloned()
            .collect();
        let mut m = TfidfClassifier::new(&train, &c.hierarchy, 16, 1).unwrap();
        assert!(!m.classes.contains(&held));
        m.train(&train, &cfg).unwrap();
        let p = m.predict_proba(&c.records[0].description);
        assert_eq!(p.len(), m.classes.len());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let scorer = ClassScorer::new(&m, &c.hierarchy).unwrap();
        let q = scorer.prepare(&c.records[0].description).unwrap();
        if c.hierarchy.children(held.as_str()).unwrap().is_empty() {
            assert_eq!(scorer.score(&q, &[&held]).unwrap()[0].link, 0.0);
        }
        let back = TfidfClassifier::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.classes, m.classes);
    }

    #[test]
    fn link_model_checkpoint_round_trip() {
        let (c, _) = tiny();
        let m = TfidfLinkModel::new(
            TfidfLinkConfig::default(),
            &link_corpus(&c.records, &c.hierarchy),
            2,
        )
        .unwrap();
        let back = TfidfLinkModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.vectorizer, m.vectorizer);
        let a = m.embed(&m.prepare(&c.records[1].description)).unwrap();
        let b = back
            .embed(&back.prepare(&c.records[1].description))
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
