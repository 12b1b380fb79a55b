//! Analytic gradients of the link + reconstruction loss against central
//! finite differences.

use v2w_core::encoder::EncoderConfig;
use v2w_core::gradcheck::{check_link_step, GradCheck};
use v2w_core::model::{ModelConfig, V2wModel};
use v2w_core::synth::{generate, SynthConfig};
use v2w_core::tokenizer::Vocabulary;
use v2w_core::trainer::{TrainConfig, TrainingCweSet};
use v2w_core::CombinationKind;

const FD_STEP: f64 = 1e-4;
// |x − y| is not differentiable at x = y; a ±1e-4 nudge of a pooler weight
// crosses such a point for a few percent of entries, so the strict checks
// below use smooth combinations or fixtures clear of the kink.
const TOLERANCE: f64 = 1e-4;

fn run(
    layers: usize,
    frozen: usize,
    max_len: usize,
    rd: bool,
    combination: CombinationKind,
    seed: u64,
) -> GradCheck {
    let corpus = generate(&SynthConfig {
        level_sizes: vec![2, 2, 1],
        cves: 4,
        filler_words: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let h = &corpus.hierarchy;
    let mut texts: Vec<&str> = corpus
        .records
        .iter()
        .map(|r| r.description.as_str())
        .collect();
    texts.extend(h.nodes().map(|n| n.description.as_str()));
    let vocab = Vocabulary::build(&texts, 50).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers,
            hidden: 8,
            heads: 2,
            max_len,
            vocab_size: 0,
            frozen_layers: frozen,
            ffn_mult: 2,
            dropout: 0.1,
        },
        combination,
        ..ModelConfig::default()
    };
    let mut model = V2wModel::new(config, vocab, seed).unwrap();
    let cfg = TrainConfig {
        k_neg: 2,
        rd_enabled: rd,
        seed,
        ..TrainConfig::default()
    };
    let u = TrainingCweSet::all(h);
    check_link_step(
        &mut model,
        &corpus.records[..2],
        h,
        &u,
        &cfg,
        1,
        FD_STEP,
        1e-6,
    )
    .unwrap()
}

fn assert_close(c: &GradCheck) {
    assert!(c.missing.is_empty(), "no gradient for {:?}", c.missing);
    assert!(
        c.frozen_with_grad.is_empty(),
        "frozen tensors with gradients {:?}",
        c.frozen_with_grad
    );
    let w = c.worst_tensor().unwrap();
    assert!(
        w.rel_error < TOLERANCE,
        "{} relative error {:e}",
        w.name,
        w.rel_error
    );
}

#[test]
fn tiny_model_with_reconstruction() {
    let c = run(1, 0, 6, true, CombinationKind::AbsDiffMul, 2);
    assert!(c.tensors.iter().any(|t| t.name.starts_with("decoder.")));
    assert!(c
        .tensors
        .iter()
        .any(|t| t.name == "encoder.embeddings.token"));
    assert_close(&c);
}

#[test]
fn concat_link_only() {
    assert_close(&run(1, 0, 8, false, CombinationKind::Concat, 3));
}

#[test]
fn frozen_layers_get_no_gradient() {
    let c = run(2, 1, 8, true, CombinationKind::ConcatMul, 4);
    assert!(c
        .tensors
        .iter()
        .all(|t| !t.name.starts_with("encoder.layers.0.")
            && !t.name.starts_with("encoder.embeddings")));
    assert!(c
        .tensors
        .iter()
        .any(|t| t.name.starts_with("encoder.layers.1.")));
    assert_close(&c);
}
