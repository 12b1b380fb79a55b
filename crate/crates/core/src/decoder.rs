//! Masked-LM reconstruction head: dense → GELU → layer norm → vocabulary
//! projection, scored with mean cross-entropy over masked positions.

use rand::Rng;

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::encoder::{HiddenStates, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_acc, Matrix};
use crate::tokenizer::MaskedSequence;

#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub(crate) dense_weight: ParamId,
    pub(crate) dense_bias: ParamId,
    pub(crate) norm_gain: ParamId,
    pub(crate) norm_bias: ParamId,
    pub(crate) out_weight: ParamId,
    pub(crate) out_bias: ParamId,
}

const NAMES: [&str; 6] = [
    "decoder.dense.weight",
    "decoder.dense.bias",
    "decoder.norm.gain",
    "decoder.norm.bias",
    "decoder.output.weight",
    "decoder.output.bias",
];

impl DecoderHead {
    pub(crate) fn init<R: Rng>(
        store: &mut ParamStore,
        hidden: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        DecoderHead {
            dense_weight: store.add_normal(NAMES[0], hidden, hidden, INIT_STD, rng),
            dense_bias: store.add_constant(NAMES[1], 1, hidden, 0.0),
            norm_gain: store.add_constant(NAMES[2], 1, hidden, 1.0),
            norm_bias: store.add_constant(NAMES[3], 1, hidden, 0.0),
            out_weight: store.add_normal(NAMES[4], hidden, vocab, INIT_STD, rng),
            out_bias: store.add_constant(NAMES[5], 1, vocab, 0.0),
        }
    }

    pub(crate) fn bind(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))
        };
        Ok(DecoderHead {
            dense_weight: get(NAMES[0])?,
            dense_bias: get(NAMES[1])?,
            norm_gain: get(NAMES[2])?,
            norm_bias: get(NAMES[3])?,
            out_weight: get(NAMES[4])?,
            out_bias: get(NAMES[5])?,
        })
    }

    pub(crate) fn params(&self) -> [ParamId; 6] {
        [
            self.dense_weight,
            self.dense_bias,
            self.norm_gain,
            self.norm_bias,
            self.out_weight,
            self.out_bias,
        ]
    }

    /// Vocabulary logits, one row per entry of `positions`.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        hs: &HiddenStates,
        positions: &[usize],
    ) -> Result<Matrix> {
        let rows = hs.values.rows;
        if let Some(p) = positions.iter().find(|p| **p >= rows) {
            return Err(Error::InvalidArgument(format!(
                "position {p} outside {rows} rows"
            )));
        }
        let vocab = store.value(self.out_weight).cols;
        if positions.is_empty() {
            return Ok(Matrix::zeros(0, vocab));
        }
        let mut tape = Tape::new(store);
        let h = tape.input(hs.values.clone(), false);
        let logits = self.logits_tape(&mut tape, h, positions);
        Ok(tape.value(logits).clone())
    }

    pub(crate) fn logits_tape(&self, tape: &mut Tape<'_>, hidden: Var, positions: &[usize]) -> Var {
        let rows = tape.gather_rows(hidden, positions);
        let d = tape.linear(rows, self.dense_weight, Some(self.dense_bias));
        let d = tape.gelu(d);
        let d = tape.layer_norm(d, self.norm_gain, self.norm_bias);
        tape.linear(d, self.out_weight, Some(self.out_bias))
    }

    /// Mean cross-entropy over the masked positions, or `None` when nothing
    /// was masked.
    pub(crate) fn loss_tape(
        &self,
        tape: &mut Tape<'_>,
        hidden: Var,
        masked: &MaskedSequence,
    ) -> Option<Var> {
        if masked.targets.is_empty() {
            return None;
        }
        let positions: Vec<usize> = masked.targets.keys().copied().collect();
        let targets: Vec<usize> = masked.targets.values().map(|t| *t as usize).collect();
        let logits = self.logits_tape(tape, hidden, &positions);
        let w = 1.0 / positions.len() as f64;
        Some(tape.cross_entropy(logits, &targets, &vec![w; positions.len()]))
    }

    /// Reconstruction loss of a sequence from its hidden states; zero when
    /// nothing was masked.
    pub fn reconstruction_loss(
        &self,
        store: &ParamStore,
        hs: &HiddenStates,
        masked: &MaskedSequence,
    ) -> Result<f64> {
        if masked.targets.keys().any(|p| *p >= hs.values.rows) {
            return Err(Error::InvalidArgument(
                "masked position outside hidden states".into(),
            ));
        }
        let mut tape = Tape::new(store);
        let h = tape.input(hs.values.clone(), false);
        Ok(self
            .loss_tape(&mut tape, h, masked)
            .map(|l| tape.value(l).data[0])
            .unwrap_or(0.0))
    }
}

/// Straight-line reference for one row, used to cross-check the tape path.
#[doc(hidden)]
pub fn reference_logits_row(store: &ParamStore, head: &DecoderHead, row: &[f64]) -> Vec<f64> {
    let dw = store.value(head.dense_weight);
    let mut d = store.value(head.dense_bias).data.clone();
    matmul_acc(row, &dw.data, &mut d, 1, dw.rows, dw.cols);
    for v in &mut d {
        let u = 0.797_884_560_802_865_4 * (*v + 0.044_715 * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + u.tanh());
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
    let g = &store.value(head.norm_gain).data;
    let b = &store.value(head.norm_bias).data;
    let normed: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i])
        .collect();
    let ow = store.value(head.out_weight);
    let mut out = store.value(head.out_bias).data.clone();
    matmul_acc(&normed, &ow.data, &mut out, 1, ow.rows, ow.cols);
    out
}
