//! Bidirectional pre-norm transformer encoder with pooling.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::TokenSequence;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Bottom layers (and the embeddings) held fixed during link training.
    pub frozen_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            frozen_layers: 2,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("layers, hidden, heads and ffn_mult must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.frozen_layers > self.layers {
            return bad(format!(
                "cannot freeze {} of {} layers",
                self.frozen_layers, self.layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return bad("max_len must hold [CLS] and [SEP]".into());
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return bad("vocabulary too small".into());
        }
        Ok(())
    }
}

/// Pooling strategy applied to the last hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pooling {
    Cls,
    #[default]
    Mean,
    Max,
}

impl Pooling {
    fn kind(self) -> PoolKind {
        match self {
            Pooling::Cls => PoolKind::Cls,
            Pooling::Mean => PoolKind::Mean,
            Pooling::Max => PoolKind::Max,
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CLS" => Ok(Pooling::Cls),
            "MEAN" => Ok(Pooling::Mean),
            "MAX" => Ok(Pooling::Max),
            _ => Err(Error::InvalidArgument(format!("unknown pooling `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerParams {
    fn all(&self) -> [ParamId; 16] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

/// Parameter handles of the encoder body and its pooling transformation.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub(crate) token: ParamId,
    pub(crate) position: ParamId,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) final_gain: ParamId,
    pub(crate) final_bias: ParamId,
    pub(crate) pooler_weight: ParamId,
    pub(crate) pooler_bias: ParamId,
}

impl EncoderParams {
    pub(crate) fn init<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let f = h * cfg.ffn_mult;
        let token = store.add_normal("encoder.embeddings.token", cfg.vocab_size, h, INIT_STD, rng);
        let position =
            store.add_normal("encoder.embeddings.position", cfg.max_len, h, INIT_STD, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("encoder.layers.{l}.{s}");
                LayerParams {
                    ln1_gain: store.add_constant(n("attn_norm.gain"), 1, h, 1.0),
                    ln1_bias: store.add_constant(n("attn_norm.bias"), 1, h, 0.0),
                    wq: store.add_normal(n("attn.query.weight"), h, h, INIT_STD, rng),
                    bq: store.add_constant(n("attn.query.bias"), 1, h, 0.0),
                    wk: store.add_normal(n("attn.key.weight"), h, h, INIT_STD, rng),
                    bk: store.add_constant(n("attn.key.bias"), 1, h, 0.0),
                    wv: store.add_normal(n("attn.value.weight"), h, h, INIT_STD, rng),
                    bv: store.add_constant(n("attn.value.bias"), 1, h, 0.0),
                    wo: store.add_normal(n("attn.output.weight"), h, h, INIT_STD, rng),
                    bo: store.add_constant(n("attn.output.bias"), 1, h, 0.0),
                    ln2_gain: store.add_constant(n("ffn_norm.gain"), 1, h, 1.0),
                    ln2_bias: store.add_constant(n("ffn_norm.bias"), 1, h, 0.0),
                    w1: store.add_normal(n("ffn.up.weight"), h, f, INIT_STD, rng),
                    b1: store.add_constant(n("ffn.up.bias"), 1, f, 0.0),
                    w2: store.add_normal(n("ffn.down.weight"), f, h, INIT_STD, rng),
                    b2: store.add_constant(n("ffn.down.bias"), 1, h, 0.0),
                }
            })
            .collect();
        EncoderParams {
            token,
            position,
            layers,
            final_gain: store.add_constant("encoder.final_norm.gain", 1, h, 1.0),
            final_bias: store.add_constant("encoder.final_norm.bias", 1, h, 0.0),
            pooler_weight: store.add_normal("pooler.weight", h, h, INIT_STD, rng),
            pooler_bias: store.add_constant("pooler.bias", 1, h, 0.0),
        }
    }

    pub(crate) fn bind(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("encoder.layers.{l}.{s}");
            layers.push(LayerParams {
                ln1_gain: get(n("attn_norm.gain"))?,
                ln1_bias: get(n("attn_norm.bias"))?,
                wq: get(n("attn.query.weight"))?,
                bq: get(n("attn.query.bias"))?,
                wk: get(n("attn.key.weight"))?,
                bk: get(n("attn.key.bias"))?,
                wv: get(n("attn.value.weight"))?,
                bv: get(n("attn.value.bias"))?,
                wo: get(n("attn.output.weight"))?,
                bo: get(n("attn.output.bias"))?,
                ln2_gain: get(n("ffn_norm.gain"))?,
                ln2_bias: get(n("ffn_norm.bias"))?,
                w1: get(n("ffn.up.weight"))?,
                b1: get(n("ffn.up.bias"))?,
                w2: get(n("ffn.down.weight"))?,
                b2: get(n("ffn.down.bias"))?,
            });
        }
        Ok(EncoderParams {
            token: get("encoder.embeddings.token".into())?,
            position: get("encoder.embeddings.position".into())?,
            layers,
            final_gain: get("encoder.final_norm.gain".into())?,
            final_bias: get("encoder.final_norm.bias".into())?,
            pooler_weight: get("pooler.weight".into())?,
            pooler_bias: get("pooler.bias".into())?,
        })
    }

    /// Embedding and per-layer parameter groups, bottom to top.
    pub(crate) fn frozen_groups(&self) -> (Vec<ParamId>, Vec<Vec<ParamId>>) {
        (
            vec![self.token, self.position],
            self.layers.iter().map(|l| l.all().to_vec()).collect(),
        )
    }

    /// Runs the encoder on `ids`; returns the `n × H` last hidden state.
    pub(crate) fn forward_tape(
        &self,
        cfg: &EncoderConfig,
        tape: &mut Tape<'_>,
        ids: &[u32],
        valid: &[bool],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|i| *i as usize).collect();
        if ids.iter().any(|i| *i >= cfg.vocab_size) {
            return Err(Error::InvalidArgument("token id outside vocabulary".into()));
        }
        if ids.len() > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                cfg.max_len
            )));
        }
        let mut x = tape.embed(self.token, self.position, &ids);
        x = apply_dropout(tape, x, cfg.dropout, dropout.as_deref_mut());
        for (li, layer) in self.layers.iter().enumerate() {
            let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias);
            let q = tape.linear(h, layer.wq, Some(layer.bq));
            let k = tape.linear(h, layer.wk, Some(layer.bk));
            let v = tape.linear(h, layer.wv, Some(layer.bv));
            let a = tape.attention(q, k, v, cfg.heads, valid);
            let a = tape.linear(a, layer.wo, Some(layer.bo));
            let a = apply_dropout(tape, a, cfg.dropout, dropout.as_deref_mut());
            x = tape.add(x, a);

            let h = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias);
            let f = tape.linear(h, layer.w1, Some(layer.b1));
            let f = tape.gelu(f);
            let f = tape.linear(f, layer.w2, Some(layer.b2));
            let f = apply_dropout(tape, f, cfg.dropout, dropout.as_deref_mut());
            x = tape.add(x, f);
            if !tape.value(x).is_finite() {
                return Err(Error::NonFinite { layer: li + 1 });
            }
        }
        Ok(tape.layer_norm(x, self.final_gain, self.final_bias))
    }

    /// Pooling reduction followed by the tanh transformation layer.
    pub(crate) fn pool_tape(
        &self,
        tape: &mut Tape<'_>,
        hidden: Var,
        valid: &[bool],
        pooling: Pooling,
    ) -> Var {
        let p = tape.pool(hidden, pooling.kind(), valid);
        let p = tape.linear(p, self.pooler_weight, Some(self.pooler_bias));
        tape.tanh(p)
    }
}

pub(crate) fn apply_dropout<R: RngCore + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    p: f64,
    rng: Option<&mut R>,
) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let n = tape.value(x).data.len();
            let keep = 1.0 / (1.0 - p);
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            tape.dropout(x, mask)
        }
        _ => x,
    }
}

/// Last hidden state of one sequence (`T × H`).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub values: Matrix,
}

/// Pooled, transformed sequence representation.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
}

/// Pooling reduction of `hs` before the transformation layer: row 0 for
/// `Cls`, the masked mean or masked elementwise max otherwise.
pub fn pool_rows(hs: &HiddenStates, attention_mask: &[u8], pooling: Pooling) -> Result<Vec<f64>> {
    let m = &hs.values;
    if attention_mask.len() != m.rows {
        return Err(Error::Shape(format!(
            "mask of length {} for {} rows",
            attention_mask.len(),
            m.rows
        )));
    }
    let rows: Vec<usize> = (0..m.rows).filter(|r| attention_mask[*r] == 1).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("attention mask is all zero".into()));
    }
    Ok(match pooling {
        Pooling::Cls => m.row(0).to_vec(),
        Pooling::Mean => {
            let mut out = vec![0.0; m.cols];
            for r in &rows {
                for (o, v) in out.iter_mut().zip(m.row(*r)) {
                    *o += v;
                }
            }
            out.iter().map(|v| v / rows.len() as f64).collect()
        }
        Pooling::Max => (0..m.cols)
            .map(|c| {
                rows.iter()
                    .map(|r| m.get(*r, c))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
    })
}

/// Trims a padded sequence to its non-pad prefix.
pub(crate) fn active_ids(seq: &TokenSequence) -> &[u32] {
    &seq.ids[..seq.active_len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig {
            hidden: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
        c.heads = 2;
        c.frozen_layers = 5;
        assert!(c.validate().is_err());
        c.frozen_layers = 0;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pool_rows_by_hand() {
        let hs = HiddenStates {
            values: Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 3.0, 4.0, -1.0]),
        };
        assert_eq!(
            pool_rows(&hs, &[1, 1], Pooling::Mean).unwrap(),
            vec![2.0, 1.0, 1.0]
        );
        assert_eq!(
            pool_rows(&hs, &[1, 1], Pooling::Max).unwrap(),
            vec![3.0, 4.0, 3.0]
        );
        assert_eq!(
            pool_rows(&hs, &[1, 1], Pooling::Cls).unwrap(),
            vec![1.0, -2.0, 3.0]
        );
        assert_eq!(
            pool_rows(&hs, &[1, 0], Pooling::Max).unwrap(),
            vec![1.0, -2.0, 3.0]
        );
        assert!(pool_rows(&hs, &[0, 0], Pooling::Mean).is_err());
    }

    #[test]
    fn single_row_reductions_coincide() {
        let hs = HiddenStates {
            values: Matrix::from_vec(3, 2, vec![0.5, -0.25, 9.0, 9.0, 7.0, 7.0]),
        };
        let mask = [1, 0, 0];
        let cls = pool_rows(&hs, &mask, Pooling::Cls).unwrap();
        assert_eq!(pool_rows(&hs, &mask, Pooling::Mean).unwrap(), cls);
        assert_eq!(pool_rows(&hs, &mask, Pooling::Max).unwrap(), cls);
    }

    #[test]
    fn pooling_parses() {
        assert_eq!("mean".parse::<Pooling>().unwrap(), Pooling::Mean);
        assert!("avg".parse::<Pooling>().is_err());
    }
}
