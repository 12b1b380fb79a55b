//! Training-link generation, balancing, masked-LM pretraining and joint
//! link/reconstruction training.
//!
//! One link step encodes every distinct CVE and CWE of the mini-batch on its
//! own tape (in parallel), scores all links on a small head tape, then seeds
//! each sequence tape's backward pass with the gradient of its pooled vector
//! and the weight of its reconstruction term. Per-sequence gradients are
//! summed in fixed chunks, so results do not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::CveRecord;
use crate::encoder::{active_ids, apply_dropout};
use crate::error::{Error, Result};
use crate::hierarchy::{CweHierarchy, CweId};
use crate::link::{combine_tape, LinkHead, LinkLabel};
use crate::model::V2wModel;
use crate::optim::{clip_global_norm, AdamW, Schedule};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::{mask, TokenSequence};

/// Sequences per gradient-reduction chunk.
const REDUCE_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    #[default]
    Repeat,
    Weight,
}

impl std::str::FromStr for BalanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "repeat" => Ok(BalanceMode::Repeat),
            "weight" => Ok(BalanceMode::Weight),
            _ => Err(Error::InvalidArgument(format!(
                "unknown balance mode `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Sequences per pretraining batch.
    pub batch_size: usize,
    /// CVEs per link-training batch.
    pub link_batch_size: usize,
    pub k_neg: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Peak pretraining learning rate.
    pub lr: f64,
    /// Peak link-training learning rate.
    pub link_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub epochs_pretrain: usize,
    pub epochs_link: usize,
    pub seed: u64,
    pub rd_enabled: bool,
    pub balance: BalanceMode,
    pub clip_norm: f64,
    /// Dropout on the combined pair vector before the link head.
    pub head_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            link_batch_size: 8,
            k_neg: 32,
            gamma1: 1.0,
            gamma2: 1.0,
            lr: 5e-4,
            link_lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            epochs_pretrain: 25,
            epochs_link: 20,
            seed: 0,
            rd_enabled: true,
            balance: BalanceMode::Repeat,
            clip_norm: 1.0,
            head_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.k_neg == 0 {
            return bad("k_neg must be at least 1");
        }
        if self.batch_size == 0 || self.link_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return bad("gamma1 and gamma2 must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return bad("head_dropout must lie in [0, 1)");
        }
        if !(self.lr >= 0.0
            && self.link_lr >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0)
        {
            return bad("lr and weight_decay must be non-negative, clip_norm positive");
        }
        Ok(())
    }
}

/// One training pair with its loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPair {
    pub cve: String,
    pub cwe: CweId,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkBatch {
    pub positives: Vec<LinkPair>,
    pub negatives: Vec<LinkPair>,
    /// Negatives that could not be drawn because the candidate pool ran out.
    pub shortfall: usize,
}

impl LinkBatch {
    pub fn positive_weight(&self) -> f64 {
        self.positives.iter().map(|p| p.weight).sum()
    }

    pub fn negative_weight(&self) -> f64 {
        self.negatives.iter().map(|p| p.weight).sum()
    }
}

/// CWEs available to training.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingCweSet {
    pub ids: BTreeSet<CweId>,
    pub held_out: BTreeSet<CweId>,
}

impl TrainingCweSet {
    /// Every hierarchy node.
    pub fn all(h: &CweHierarchy) -> Self {
        TrainingCweSet {
            ids: h.ids().cloned().collect(),
            held_out: BTreeSet::new(),
        }
    }

    /// Every hierarchy node except `held_out`.
    pub fn excluding(h: &CweHierarchy, held_out: &BTreeSet<CweId>) -> Result<Self> {
        for id in held_out {
            h.node(id.as_str())?;
        }
        Ok(TrainingCweSet {
            ids: h
                .ids()
                .filter(|i| !held_out.contains(*i))
                .cloned()
                .collect(),
            held_out: held_out.clone(),
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }
}

/// Drops training CVEs labeled with a held-out CWE or any of its ancestors
/// or descendants. Returns the kept records and the number removed.
pub fn zero_shot_filter(
    records: &[CveRecord],
    h: &CweHierarchy,
    held_out: &BTreeSet<CweId>,
) -> Result<(Vec<CveRecord>, usize)> {
    let mut blocked = BTreeSet::new();
    for id in held_out {
        blocked.insert(id.clone());
        blocked.extend(h.ancestors(id.as_str())?);
        blocked.extend(h.descendants(id.as_str())?);
    }
    let kept: Vec<CveRecord> = records
        .iter()
        .filter(|r| r.labels.iter().all(|l| !blocked.contains(l)))
        .cloned()
        .collect();
    let removed = records.len() - kept.len();
    Ok((kept, removed))
}

/// Positive closure of a record's in-hierarchy labels.
pub fn positive_set(record: &CveRecord, h: &CweHierarchy) -> Result<BTreeSet<CweId>> {
    h.positive_closure(record.labels.iter().filter(|l| h.contains(l.as_str())))
}

/// Positives: each labeled CWE plus its ancestors. Negatives: `k_neg` CWEs
/// drawn uniformly without replacement from `u` minus the positives.
pub fn generate_links<R: RngCore + ?Sized>(
    batch: &[CveRecord],
    h: &CweHierarchy,
    u: &TrainingCweSet,
    k_neg: usize,
    rng: &mut R,
) -> Result<LinkBatch> {
    let mut out = LinkBatch::default();
    for r in batch {
        if !r.labels.iter().any(|l| u.contains(l.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "{} has no label among the training CWEs",
                r.id
            )));
        }
        let pos = positive_set(r, h)?;
        for cwe in &pos {
            out.positives.push(LinkPair {
                cve: r.id.clone(),
                cwe: cwe.clone(),
                weight: 1.0,
            });
        }
        let pool: Vec<&CweId> = u.ids.iter().filter(|c| !pos.contains(*c)).collect();
        let take = k_neg.min(pool.len());
        out.shortfall += k_neg - take;
        let mut picks = rand::seq::index::sample(rng, pool.len(), take).into_vec();
        picks.sort_unstable();
        for i in picks {
            debug_assert!(!pos.contains(pool[i]));
            out.negatives.push(LinkPair {
                cve: r.id.clone(),
                cwe: pool[i].clone(),
                weight: 1.0,
            });
        }
    }
    Ok(out)
}

/// Equalizes the total weight of positives and negatives. `Repeat` cycles
/// the smaller side until both have the same count; `Weight` gives each
/// positive weight `|N| / |P|`.
pub fn balance(lb: &LinkBatch, mode: BalanceMode) -> Result<LinkBatch> {
    if lb.positives.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot balance a batch without positive links".into(),
        ));
    }
    let mut out = lb.clone();
    let (np, nn) = (lb.positives.len(), lb.negatives.len());
    if nn == 0 {
        log::warn!("batch has no negative links; left unbalanced");
        return Ok(out);
    }
    match mode {
        BalanceMode::Repeat => {
            let (small, src, target) = if np < nn {
                (&mut out.positives, &lb.positives, nn)
            } else {
                (&mut out.negatives, &lb.negatives, np)
            };
            let mut i = 0;
            while small.len() < target {
                small.push(src[i % src.len()].clone());
                i += 1;
            }
        }
        BalanceMode::Weight => {
            let w = nn as f64 / np as f64;
            out.positives.iter_mut().for_each(|p| p.weight = w);
            out.negatives.iter_mut().for_each(|p| p.weight = 1.0);
        }
    }
    Ok(out)
}

/// A model that maps a text to a pooled vector on a tape and scores pairs
/// with a [`LinkHead`].
pub trait LinkEncoder: Sync {
    type Input: Send + Sync;

    fn prepare(&self, text: &str) -> Self::Input;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn head(&self) -> &LinkHead;
    /// Whether the encoder has a reconstruction decoder.
    fn supports_rd(&self) -> bool;

    /// Records the pooled `1 × H` vector and, when `rd` is set, the
    /// reconstruction loss of a corrupted copy. `rng` is `None` in
    /// evaluation mode (no dropout, no corruption).
    fn pass<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &Self::Input,
        rd: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<Var>)>;

    /// Pooled vector in evaluation mode.
    fn embed(&self, input: &Self::Input) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.store());
        let (pooled, _) = self.pass(&mut tape, input, false, None)?;
        Ok(tape.value(pooled).data.clone())
    }
}

impl LinkEncoder for V2wModel {
    type Input = TokenSequence;

    fn prepare(&self, text: &str) -> TokenSequence {
        self.encode_text(text)
    }

    fn store(&self) -> &ParamStore {
        V2wModel::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        V2wModel::store_mut(self)
    }

    fn head(&self) -> &LinkHead {
        &self.link
    }

    fn supports_rd(&self) -> bool {
        true
    }

    fn pass<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &TokenSequence,
        rd: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<Var>)> {
        let masked = match (rd, rng.as_deref_mut()) {
            (true, Some(r)) => Some(mask(input, self.vocab().len(), r)),
            _ => None,
        };
        let seq = masked.as_ref().map_or(input, |m| &m.corrupted);
        let ids = active_ids(seq);
        let valid = vec![true; ids.len()];
        let cfg = &self.config().encoder;
        let h = self.encoder.forward_tape(
            cfg,
            tape,
            ids,
            &valid,
            rng.map(|r| r as &mut dyn RngCore),
        )?;
        let pooled = self
            .encoder
            .pool_tape(tape, h, &valid, self.config().pooling);
        let rl = masked.and_then(|m| self.decoder.loss_tape(tape, h, &m));
        Ok((pooled, rl))
    }
}

/// Independent stream per (purpose, step, index) so draws do not depend on
/// scheduling.
pub(crate) fn stream_rng(seed: u64, purpose: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream((step << 32) | (index & 0xFFFF_FFFF));
    r
}

const PURPOSE_LINKS: u64 = 1;
const PURPOSE_SEQ: u64 = 2;
const PURPOSE_HEAD: u64 = 3;
pub(crate) const PURPOSE_SHUFFLE: u64 = 4;
const PURPOSE_PRETRAIN: u64 = 5;
pub(crate) const PURPOSE_CLASS: u64 = 6;

/// Losses and gradients of one mini-batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Weighted link cross-entropy `γ₁ Σ_P w·CL + γ₂ Σ_N w·CL`.
    pub loss_lp: f64,
    /// Reconstruction terms, each sequence weighted by the total link
    /// weight it participates in.
    pub loss_rd: f64,
    pub grads: Option<Gradients>,
    pub links: usize,
    pub shortfall: usize,
}

impl StepOutput {
    pub fn loss(&self) -> f64 {
        self.loss_lp + self.loss_rd
    }
}

/// Prepared inputs for the CVEs and CWEs that link training touches.
pub struct PreparedInputs<I> {
    pub cves: BTreeMap<String, I>,
    pub cwes: BTreeMap<CweId, I>,
}

impl<I> PreparedInputs<I> {
    pub fn new<E: LinkEncoder<Input = I>>(
        enc: &E,
        records: &[CveRecord],
        h: &CweHierarchy,
    ) -> Self {
        PreparedInputs {
            cves: records
                .iter()
                .map(|r| (r.id.clone(), enc.prepare(&r.description)))
                .collect(),
            cwes: h
                .nodes()
                .map(|n| (n.id.clone(), enc.prepare(&n.description)))
                .collect(),
        }
    }
}

struct SeqPass<'a> {
    tape: Tape<'a>,
    pooled: Var,
    rl: Option<Var>,
}

/// Loss (and optionally gradients) of the joint objective on one mini-batch
/// at optimizer step `step`. All randomness (negatives, corruption, dropout)
/// is a function of `(cfg.seed, step)`.
pub fn link_step<E: LinkEncoder>(
    enc: &E,
    batch: &[CveRecord],
    inputs: &PreparedInputs<E::Input>,
    h: &CweHierarchy,
    u: &TrainingCweSet,
    cfg: &TrainConfig,
    step: u64,
    want_grads: bool,
) -> Result<StepOutput> {
    let rd = cfg.rd_enabled && enc.supports_rd();
    let mut link_rng = stream_rng(cfg.seed, PURPOSE_LINKS, step, 0);
    let raw = generate_links(batch, h, u, cfg.k_neg, &mut link_rng)?;
    let lb = balance(&raw, cfg.balance)?;

    let cve_index: BTreeMap<&str, usize> = batch
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let cwe_ids: BTreeSet<&CweId> = lb
        .positives
        .iter()
        .chain(&lb.negatives)
        .map(|p| &p.cwe)
        .collect();
    let cwe_index: BTreeMap<&CweId, usize> =
        cwe_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let mut seq_inputs: Vec<&E::Input> = Vec::with_capacity(batch.len() + cwe_ids.len());
    for r in batch {
        seq_inputs.push(
            inputs
                .cves
                .get(&r.id)
                .ok_or_else(|| Error::InvalidArgument(format!("no prepared input for {}", r.id)))?,
        );
    }
    for c in &cwe_ids {
        seq_inputs.push(
            inputs
                .cwes
                .get(*c)
                .ok_or_else(|| Error::UnknownCwe(c.to_string()))?,
        );
    }

    let store = enc.store();
    let passes: Vec<SeqPass<'_>> = seq_inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut rng = stream_rng(cfg.seed, PURPOSE_SEQ, step, i as u64);
            let mut tape = Tape::new(store);
            let (pooled, rl) = enc.pass(&mut tape, input, rd, Some(&mut rng))?;
            Ok(SeqPass { tape, pooled, rl })
        })
        .collect::<Result<_>>()?;

    let n_cve = batch.len();
    let hidden = passes[0].tape.value(passes[0].pooled).cols;
    let stack = |range: std::ops::Range<usize>| {
        let mut m = Matrix::zeros(range.len(), hidden);
        for (row, i) in range.enumerate() {
            m.row_mut(row)
                .copy_from_slice(&passes[i].tape.value(passes[i].pooled).data);
        }
        m
    };

    let mut head = Tape::new(store);
    let xs = head.input(stack(0..n_cve), want_grads);
    let ys = head.input(stack(n_cve..passes.len()), want_grads);
    let mut cve_rows = Vec::new();
    let mut cwe_rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut coef = vec![0.0; passes.len()];
    for (pairs, label, gamma) in [
        (&lb.positives, LinkLabel::Link, cfg.gamma1),
        (&lb.negatives, LinkLabel::Unlink, cfg.gamma2),
    ] {
        for p in pairs {
            let ci = cve_index[p.cve.as_str()];
            let wi = cwe_index[&p.cwe];
            cve_rows.push(ci);
            cwe_rows.push(wi);
            targets.push(label.index());
            let w = gamma * p.weight;
            weights.push(w);
            coef[ci] += w;
            coef[n_cve + wi] += w;
        }
    }
    let x = head.gather_rows(xs, &cve_rows);
    let y = head.gather_rows(ys, &cwe_rows);
    let c = combine_tape(&mut head, x, y, enc.head().kind);
    let mut head_rng = stream_rng(cfg.seed, PURPOSE_HEAD, step, 0);
    let c = apply_dropout(&mut head, c, cfg.head_dropout, Some(&mut head_rng));
    let logits = enc.head().logits_tape(&mut head, c);
    let loss = head.cross_entropy(logits, &targets, &weights);
    let loss_lp = head.value(loss).data[0];
    let loss_rd: f64 = passes
        .iter()
        .zip(&coef)
        .filter_map(|(p, c)| p.rl.map(|rl| c * p.tape.value(rl).data[0]))
        .sum();
    let links = targets.len();

    let grads = if want_grads {
        let back = head.backward(loss);
        let dx = back
            .input_grad(xs)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(n_cve, hidden));
        let dy = back
            .input_grad(ys)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(passes.len() - n_cve, hidden));
        let chunks: Vec<Gradients> = passes
            .par_chunks(REDUCE_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut acc = Gradients::for_store(store);
                for (j, p) in chunk.iter().enumerate() {
                    let i = ci * REDUCE_CHUNK + j;
                    let row = if i < n_cve {
                        dx.row(i)
                    } else {
                        dy.row(i - n_cve)
                    };
                    let mut seeds = vec![(p.pooled, Matrix::row_vector(row.to_vec()))];
                    if let Some(rl) = p.rl {
                        seeds.push((rl, Matrix::scalar(coef[i])));
                    }
                    acc.accumulate(&p.tape.backward_seeded(&seeds).params);
                }
                acc
            })
            .collect();
        let mut total = back.params;
        for c in &chunks {
            total.accumulate(c);
        }
        Some(total)
    } else {
        None
    };
    Ok(StepOutput {
        loss_lp,
        loss_rd,
        grads,
        links,
        shortfall: lb.shortfall,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss_lp: f64,
    pub loss_rd: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn epochs(&self, split: &str) -> Vec<&LogRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }
}

pub(crate) fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Shuffled order for `epoch`.
pub(crate) fn epoch_order(n: usize, seed: u64, purpose: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, purpose, epoch as u64, 0));
    idx
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkTrainSummary {
    pub steps: usize,
    /// Training records dropped for having no label among the training CWEs.
    pub skipped_records: usize,
    pub negative_shortfall: usize,
    pub epoch_loss: Vec<f64>,
}

/// Joint link/reconstruction training. Frozen parameters stay untouched.
pub fn train_link<E: LinkEncoder>(
    enc: &mut E,
    records: &[CveRecord],
    h: &CweHierarchy,
    u: &TrainingCweSet,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<LinkTrainSummary> {
    cfg.validate()?;
    let usable: Vec<CveRecord> = records
        .iter()
        .filter(|r| r.labels.iter().any(|l| u.contains(l.as_str())))
        .cloned()
        .collect();
    let mut summary = LinkTrainSummary {
        skipped_records: records.len() - usable.len(),
        ..LinkTrainSummary::default()
    };
    if usable.is_empty() || cfg.epochs_link == 0 {
        return Ok(summary);
    }
    let inputs = PreparedInputs::new(&*enc, &usable, h);
    let per_epoch = batches_per_epoch(usable.len(), cfg.link_batch_size);
    let total = per_epoch * cfg.epochs_link;
    let mut opt = AdamW::new(
        Schedule::new(cfg.link_lr, cfg.warmup_frac, total),
        cfg.weight_decay,
    );
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_link {
        let order = epoch_order(usable.len(), cfg.seed, PURPOSE_SHUFFLE, epoch);
        let (mut sum_lp, mut sum_rd, mut lr_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.link_batch_size) {
            let batch: Vec<CveRecord> = chunk.iter().map(|i| usable[*i].clone()).collect();
            let out = link_step(&*enc, &batch, &inputs, h, u, cfg, step as u64, true)?;
            let loss = out.loss();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let mut grads = out.grads.expect("requested");
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            lr_sum += opt.step(enc.store_mut(), &grads);
            sum_lp += out.loss_lp;
            sum_rd += out.loss_rd;
            summary.negative_shortfall += out.shortfall;
            step += 1;
        }
        let n = per_epoch as f64;
        log.rows.push(LogRow {
            epoch: epoch + 1,
            split: "link".into(),
            loss_lp: sum_lp / n,
            loss_rd: sum_rd / n,
            lr: lr_sum / n,
        });
        summary.epoch_loss.push((sum_lp + sum_rd) / n);
        log::info!(
            "link epoch {}: loss_lp={:.4} loss_rd={:.4}",
            epoch + 1,
            sum_lp / n,
            sum_rd / n
        );
    }
    summary.steps = step;
    Ok(summary)
}

/// Mean masked-LM loss of a batch of sequences, with gradients when asked.
pub fn pretrain_step(
    model: &V2wModel,
    seqs: &[&TokenSequence],
    seed: u64,
    step: u64,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let store = model.store();
    let n = seqs.len() as f64;
    let results: Vec<(f64, Option<Gradients>)> = seqs
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = want_grads.then(|| Gradients::for_store(store));
            let mut loss = 0.0;
            for (j, seq) in chunk.iter().enumerate() {
                let i = (ci * REDUCE_CHUNK + j) as u64;
                let mut rng = stream_rng(seed, PURPOSE_PRETRAIN, step, i);
                let mut tape = Tape::new(store);
                let (_, rl) = model.pass(&mut tape, seq, true, Some(&mut rng))?;
                if let Some(rl) = rl {
                    loss += tape.value(rl).data[0] / n;
                    if let Some(acc) = acc.as_mut() {
                        acc.accumulate(
                            &tape
                                .backward_seeded(&[(rl, Matrix::scalar(1.0 / n))])
                                .params,
                        );
                    }
                }
            }
            Ok((loss, acc))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = want_grads.then(|| Gradients::for_store(store));
    for (l, g) in results {
        loss += l;
        if let (Some(total), Some(g)) = (grads.as_mut(), g) {
            total.accumulate(&g);
        }
    }
    Ok((loss, grads))
}

/// Masked-LM pretraining over `texts` with every layer trainable. The
/// configured freeze depth is restored afterwards. Returns the per-epoch
/// mean loss.
pub fn pretrain(
    model: &mut V2wModel,
    texts: &[String],
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if texts.is_empty() || cfg.epochs_pretrain == 0 {
        return Ok(Vec::new());
    }
    let frozen = model.config().encoder.frozen_layers;
    model.unfreeze_all();
    let seqs: Vec<TokenSequence> = texts
        .iter()
        .map(|t| model.encode_text(t))
        .filter(|s| s.content_len() > 0)
        .collect();
    let per_epoch = batches_per_epoch(seqs.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs_pretrain;
    let mut opt = AdamW::new(
        Schedule::new(cfg.lr, cfg.warmup_frac, total),
        cfg.weight_decay,
    );
    let mut losses = Vec::new();
    let mut step = 0usize;
    let result = (|| {
        for epoch in 0..cfg.epochs_pretrain {
            let order = epoch_order(seqs.len(), cfg.seed, PURPOSE_PRETRAIN, epoch);
            let (mut sum, mut lr_sum) = (0.0, 0.0);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&TokenSequence> = chunk.iter().map(|i| &seqs[*i]).collect();
                let (loss, grads) = pretrain_step(model, &batch, cfg.seed, step as u64, true)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, loss });
                }
                let mut grads = grads.expect("requested");
                clip_global_norm(&mut grads, cfg.clip_norm);
                lr_sum += opt.step(model.store_mut(), &grads);
                sum += loss;
                step += 1;
            }
            let n = per_epoch as f64;
            losses.push(sum / n);
            log.rows.push(LogRow {
                epoch: epoch + 1,
                split: "pretrain".into(),
                loss_lp: 0.0,
                loss_rd: sum / n,
                lr: lr_sum / n,
            });
            log::info!("pretrain epoch {}: loss={:.4}", epoch + 1, sum / n);
        }
        Ok(())
    })();
    model.set_trainable(frozen)?;
    result.map(|_| losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::CweDefinition;

    fn chain_hierarchy(extra: usize) -> CweHierarchy {
        let mut ids = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        ids.extend((0..extra).map(|i| format!("X{i:02}")));
        let defs = ids
            .iter()
            .map(|i| CweDefinition {
                id: CweId::new(i.as_str()),
                name: i.clone(),
                description: format!("weakness {i}"),
            })
            .collect();
        CweHierarchy::from_parts(
            defs,
            vec![
                (CweId::new("B"), CweId::new("A")),
                (CweId::new("C"), CweId::new("B")),
            ],
        )
        .unwrap()
    }

    fn rec(id: &str, labels: &[&str]) -> CveRecord {
        CveRecord {
            id: id.into(),
            description: format!("text {id}"),
            year: 2010,
            labels: labels.iter().map(|l| CweId::new(*l)).collect(),
        }
    }

    #[test]
    fn closure_positives_and_shortfall() {
        let h = chain_hierarchy(7);
        let u = TrainingCweSet::all(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lb = generate_links(&[rec("cve", &["C"])], &h, &u, 32, &mut rng).unwrap();
        let pos: BTreeSet<&str> = lb.positives.iter().map(|p| p.cwe.as_str()).collect();
        assert_eq!(pos, BTreeSet::from(["A", "B", "C"]));
        assert_eq!(lb.negatives.len(), 7);
        assert_eq!(lb.shortfall, 25);
        assert!(lb.negatives.iter().all(|n| !pos.contains(n.cwe.as_str())));
    }

    #[test]
    fn record_without_training_label_rejected() {
        let h = chain_hierarchy(2);
        let u = TrainingCweSet::excluding(&h, &BTreeSet::from([CweId::new("C")])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_links(&[rec("cve", &["C"])], &h, &u, 1, &mut rng).is_err());
    }

    fn pairs(n: usize, cwe: &str) -> Vec<LinkPair> {
        (0..n)
            .map(|i| LinkPair {
                cve: format!("c{i}"),
                cwe: CweId::new(cwe),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn balance_modes() {
        let lb = LinkBatch {
            positives: pairs(3, "P"),
            negatives: pairs(6, "N"),
            shortfall: 0,
        };
        let r = balance(&lb, BalanceMode::Repeat).unwrap();
        assert_eq!(r.positives.len(), 6);
        assert_eq!(r.positive_weight(), r.negative_weight());
        let w = balance(&lb, BalanceMode::Weight).unwrap();
        assert_eq!(w.positives[0].weight, 2.0);
        assert_eq!(w.positive_weight(), w.negative_weight());
        let uneven = LinkBatch {
            positives: pairs(4, "P"),
            negatives: pairs(7, "N"),
            shortfall: 0,
        };
        let r = balance(&uneven, BalanceMode::Repeat).unwrap();
        assert_eq!(r.positives.len(), 7);
        assert_eq!(r.positives[4], uneven.positives[0]);
        assert!(balance(&LinkBatch::default(), BalanceMode::Weight).is_err());
    }

    #[test]
    fn zero_shot_filter_removes_relatives() {
        let h = chain_hierarchy(2);
        let rs = vec![
            rec("1", &["A"]),
            rec("2", &["C"]),
            rec("3", &["X00"]),
            rec("4", &["B", "X01"]),
        ];
        let (kept, removed) =
            zero_shot_filter(&rs, &h, &BTreeSet::from([CweId::new("B")])).unwrap();
        assert_eq!(removed, 3);
        assert_eq!(kept, vec![rec("3", &["X00"])]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                k_neg: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                gamma1: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup_frac: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn streams_are_distinct() {
        let a = stream_rng(1, PURPOSE_SEQ, 0, 0).next_u64();
        let b = stream_rng(1, PURPOSE_SEQ, 0, 1).next_u64();
        let c = stream_rng(1, PURPOSE_SEQ, 1, 0).next_u64();
        let d = stream_rng(1, PURPOSE_HEAD, 0, 0).next_u64();
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, stream_rng(1, PURPOSE_SEQ, 0, 0).next_u64());
    }
}
