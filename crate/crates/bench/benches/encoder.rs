use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use v2w_core::model::{ModelConfig, V2wModel};
use v2w_core::synth::{generate, SynthConfig};
use v2w_core::tokenizer::Vocabulary;
use v2w_core::trainer::{link_step, PreparedInputs, TrainConfig, TrainingCweSet};

fn setup(layers: usize, hidden: usize, max_len: usize) -> (V2wModel, v2w_core::synth::SynthCorpus) {
    let corpus = generate(&SynthConfig::default()).unwrap();
    let mut texts: Vec<&str> = corpus
        .records
        .iter()
        .map(|r| r.description.as_str())
        .collect();
    texts.extend(corpus.hierarchy.nodes().map(|n| n.description.as_str()));
    let vocab = Vocabulary::build(&texts, 1000).unwrap();
    let mut config = ModelConfig::default();
    config.encoder.layers = layers;
    config.encoder.hidden = hidden;
    config.encoder.max_len = max_len;
    config.encoder.frozen_layers = 0;
    (V2wModel::new(config, vocab, 0).unwrap(), corpus)
}

fn embed(c: &mut Criterion) {
    let mut group = c.benchmark_group("embed");
    for (layers, hidden) in [(2, 64), (4, 128)] {
        let (model, corpus) = setup(layers, hidden, 64);
        let seq = model.encode_text(&corpus.records[0].description);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("L{layers}-H{hidden}")),
            &seq,
            |b, seq| b.iter(|| model.embed(seq).unwrap()),
        );
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("link_step");
    group.sample_size(10);
    let (model, corpus) = setup(2, 64, 64);
    let h = &corpus.hierarchy;
    let u = TrainingCweSet::all(h);
    let batch = &corpus.records[..8];
    let inputs = PreparedInputs::new(&model, batch, h);
    for rd in [false, true] {
        let cfg = TrainConfig {
            rd_enabled: rd,
            ..TrainConfig::default()
        };
        group.bench_function(if rd { "LP+RD" } else { "LP" }, |b| {
            b.iter(|| link_step(&model, batch, &inputs, h, &u, &cfg, 1, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, embed, train_step);
criterion_main!(benches);
