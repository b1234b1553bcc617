//! Criterion benchmarks for the hot paths of the core crate; see `benches/`.
