//! Criterion benchmarks for the encoder and hierarchy hot paths; see `benches/`.
