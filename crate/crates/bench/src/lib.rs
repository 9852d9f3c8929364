//! Criterion benchmarks for the voting and simulation kernels; see `benches/`.
