use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use v2w_core::eval::{
    random_baseline_exact, random_baseline_monte_carlo, uniform_node_truth, REPORT_TRIPLES,
};
use v2w_core::synth::reference_shaped_hierarchy;
use v2w_core::{CweId, KTriple};

fn paths(c: &mut Criterion) {
    let h = reference_shaped_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: BTreeMap<CweId, f64> = h.ids().map(|id| (id.clone(), rng.random())).collect();
    for k in REPORT_TRIPLES {
        c.bench_function(&format!("enumerate_paths {k}"), |b| {
            b.iter(|| h.enumerate_paths(&scores, k).unwrap())
        });
    }
    let leaves: Vec<CweId> = h
        .ids()
        .filter(|id| h.children(id.as_str()).unwrap().is_empty())
        .cloned()
        .collect();
    c.bench_function("positive_closure", |b| {
        b.iter(|| h.positive_closure(leaves.iter().take(3)).unwrap())
    });
}

fn baseline(c: &mut Criterion) {
    let h = reference_shaped_hierarchy();
    let truth = uniform_node_truth(&h);
    c.bench_function("random_baseline_exact (5,2,2)", |b| {
        b.iter(|| random_baseline_exact(&h, KTriple::RELAXED, &truth).unwrap())
    });
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    group.bench_function("10k trials (5,2,2)", |b| {
        b.iter(|| random_baseline_monte_carlo(&h, KTriple::RELAXED, &truth, 10_000, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, paths, baseline);
criterion_main!(benches);
