//! Criterion benchmarks for `noisegen-core`; see `benches/`.
