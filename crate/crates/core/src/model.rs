//! The full parameter set: shared encoder, pooling transformation, link head
//! and reconstruction decoder, bound to a vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::decoder::DecoderHead;
use crate::encoder::{
    active_ids, pool_rows, EncoderConfig, EncoderParams, HiddenStates, PooledVector, Pooling,
};
use crate::error::{Error, Result};
use crate::link::{combine, CombinationKind, LinkHead, LinkScore};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_acc, Matrix};
use crate::tokenizer::{TokenSequence, Vocabulary};

pub const POOLER_ACTIVATION: &str = "tanh";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
    pub combination: CombinationKind,
    pub pooler_activation: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            pooling: Pooling::Mean,
            combination: CombinationKind::AbsDiffMul,
            pooler_activation: POOLER_ACTIVATION.into(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pooler_activation != POOLER_ACTIVATION {
            return Err(Error::InvalidArgument(format!(
                "unsupported pooler activation `{}`",
                self.pooler_activation
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct V2wModel {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    pub(crate) encoder: EncoderParams,
    pub(crate) link: LinkHead,
    pub(crate) decoder: DecoderHead,
}

impl V2wModel {
    /// Fresh model; `config.encoder.vocab_size` is overwritten with the
    /// vocabulary size.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.encoder.hidden;
        let encoder = EncoderParams::init(&config.encoder, &mut store, &mut rng);
        let link = LinkHead::init(&mut store, config.combination, h, &mut rng);
        let decoder = DecoderHead::init(&mut store, h, vocab.len(), &mut rng);
        let mut model = V2wModel {
            config,
            vocab,
            store,
            encoder,
            link,
            decoder,
        };
        model.set_trainable(model.config.encoder.frozen_layers)?;
        Ok(model)
    }

    /// Rebuilds a model from stored tensors; every tensor must be present
    /// with the shape the config implies.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        tensors: &std::collections::BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut model = V2wModel::new(config, vocab, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        model.store.load_values(tensors)?;
        model.encoder = EncoderParams::bind(&model.config.encoder, &model.store)?;
        model.link = LinkHead::bind(
            &model.store,
            model.config.combination,
            model.config.encoder.hidden,
        )?;
        model.decoder = DecoderHead::bind(&model.store)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn link_head(&self) -> &LinkHead {
        &self.link
    }

    pub fn decoder(&self) -> &DecoderHead {
        &self.decoder
    }

    /// Freezes the embeddings and the bottom `f` layers; everything above,
    /// the pooling transformation and both heads stay trainable. The final
    /// layer norm freezes with the top layer.
    pub fn set_trainable(&mut self, f: usize) -> Result<()> {
        let layers = self.config.encoder.layers;
        if f > layers {
            return Err(Error::InvalidArgument(format!(
                "cannot freeze {f} of {layers} layers"
            )));
        }
        let (embeddings, groups) = self.encoder.frozen_groups();
        for id in embeddings {
            self.store.set_trainable(id, f == 0);
        }
        for (l, group) in groups.iter().enumerate() {
            for id in group {
                self.store.set_trainable(*id, l >= f);
            }
        }
        for id in [self.encoder.final_gain, self.encoder.final_bias] {
            self.store.set_trainable(id, f < layers);
        }
        let heads = [self.encoder.pooler_weight, self.encoder.pooler_bias]
            .into_iter()
            .chain(self.link.params())
            .chain(self.decoder.params());
        for id in heads {
            self.store.set_trainable(id, true);
        }
        self.config.encoder.frozen_layers = f;
        Ok(())
    }

    /// Marks every parameter trainable (pretraining) without touching the
    /// configured freeze depth.
    pub fn unfreeze_all(&mut self) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, true);
        }
    }

    pub fn encode_text(&self, text: &str) -> TokenSequence {
        self.vocab.encode(text, self.config.encoder.max_len)
    }

    /// Last hidden state over all `T` positions, evaluation mode.
    pub fn forward(&self, seq: &TokenSequence) -> Result<HiddenStates> {
        let t = self.config.encoder.max_len;
        if seq.ids.len() != t || seq.attention_mask.len() != t {
            return Err(Error::Shape(format!(
                "sequence of length {} for T = {t}",
                seq.ids.len()
            )));
        }
        self.hidden(&seq.ids, &seq.valid())
    }

    fn hidden(&self, ids: &[u32], valid: &[bool]) -> Result<HiddenStates> {
        let mut tape = Tape::new(&self.store);
        let h = self
            .encoder
            .forward_tape(&self.config.encoder, &mut tape, ids, valid, None)?;
        Ok(HiddenStates {
            values: tape.value(h).clone(),
        })
    }

    /// Pooling reduction followed by the tanh transformation layer.
    pub fn pool(&self, hs: &HiddenStates, attention_mask: &[u8]) -> Result<PooledVector> {
        let reduced = pool_rows(hs, attention_mask, self.config.pooling)?;
        let w = self.store.value(self.encoder.pooler_weight);
        let mut out = self.store.value(self.encoder.pooler_bias).data.clone();
        matmul_acc(&reduced, &w.data, &mut out, 1, w.rows, w.cols);
        out.iter_mut().for_each(|v| *v = v.tanh());
        Ok(PooledVector { values: out })
    }

    /// Pooled representation of a sequence; the encoder runs on the non-pad
    /// prefix only, which leaves every non-pad activation unchanged.
    pub fn embed(&self, seq: &TokenSequence) -> Result<PooledVector> {
        let ids = active_ids(seq);
        let hs = self.hidden(ids, &vec![true; ids.len()])?;
        self.pool(&hs, &vec![1; ids.len()])
    }

    pub fn embed_text(&self, text: &str) -> Result<PooledVector> {
        self.embed(&self.encode_text(text))
    }

    pub fn link_score(&self, cve: &PooledVector, cwe: &PooledVector) -> Result<LinkScore> {
        let c = combine(&cve.values, &cwe.values, self.config.combination)?;
        self.link.classify(&self.store, &c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_vocab() -> Vocabulary {
        Vocabulary::build(
            &[
                "buffer overflow in the parser",
                "sql injection via login form",
            ],
            40,
        )
        .unwrap()
    }

    fn tiny_config(layers: usize, frozen: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers,
                hidden: 8,
                heads: 2,
                max_len: 12,
                vocab_size: 0,
                frozen_layers: frozen,
                ffn_mult: 2,
                dropout: 0.1,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn trainability_follows_freeze_depth() {
        let mut m = V2wModel::new(tiny_config(2, 1), tiny_vocab(), 1).unwrap();
        let s = m.store();
        assert!(!s.is_trainable(s.id("encoder.embeddings.token").unwrap()));
        assert!(!s.is_trainable(s.id("encoder.layers.0.ffn.up.weight").unwrap()));
        assert!(s.is_trainable(s.id("encoder.layers.1.ffn.up.weight").unwrap()));
        assert!(s.is_trainable(s.id("pooler.weight").unwrap()));
        m.set_trainable(0).unwrap();
        assert!(m.store().iter().all(|(_, p)| p.trainable));
        m.set_trainable(2).unwrap();
        let trainable: Vec<&str> = m
            .store()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.as_str())
            .collect();
        assert!(
            trainable.iter().all(|n| !n.starts_with("encoder.")),
            "{trainable:?}"
        );
        assert!(m.set_trainable(3).is_err());
    }

    #[test]
    fn trimmed_embedding_matches_full_forward() {
        let m = V2wModel::new(tiny_config(2, 0), tiny_vocab(), 7).unwrap();
        let seq = m.encode_text("in the");
        assert!(seq.active_len() < 12);
        let full = m.forward(&seq).unwrap();
        let pooled_full = m.pool(&full, &seq.attention_mask).unwrap();
        let pooled = m.embed(&seq).unwrap();
        for (a, b) in pooled.values.iter().zip(&pooled_full.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_sequence_is_finite() {
        let m = V2wModel::new(tiny_config(1, 0), tiny_vocab(), 3).unwrap();
        let hs = m.forward(&m.encode_text("")).unwrap();
        assert!(hs.values.is_finite());
        assert_eq!(hs.values.shape(), (12, 8));
    }

    #[test]
    fn wrong_length_rejected() {
        let m = V2wModel::new(tiny_config(1, 0), tiny_vocab(), 3).unwrap();
        let seq = m.vocab().encode("sql", 6);
        assert!(m.forward(&seq).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = V2wModel::new(tiny_config(1, 0), tiny_vocab(), 9).unwrap();
        let b = V2wModel::new(tiny_config(1, 0), tiny_vocab(), 9).unwrap();
        for ((_, p), (_, q)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}
