//! Benchmarks for qgt-core live under `benches/`.
