//! Criterion benchmarks for the segsearch workspace live in `benches/`.
