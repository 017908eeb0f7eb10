//! Criterion benchmarks for the hot paths of `ued-core`; see `benches/`.
