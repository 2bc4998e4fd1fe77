//! Criterion benchmarks for vinlab; see `benches/`.
