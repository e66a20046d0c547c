//! Criterion benchmarks for the numeric kernels and pipeline steps; see `benches/`.
