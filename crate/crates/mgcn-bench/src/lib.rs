//! Criterion benchmarks for the MGCN pipeline live under `benches/`.
//! This crate intentionally exports nothing.
