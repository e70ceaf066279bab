//! Criterion benchmarks for the detection head live in `benches/`.
