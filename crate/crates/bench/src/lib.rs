//! Criterion benchmarks for `fracmf`; see `benches/`.
