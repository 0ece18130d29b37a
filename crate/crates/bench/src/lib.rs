//! Criterion benchmarks for the hot paths of `alita-core`. See `benches/`.
