//! Criterion benchmarks for `maskrdt`; see `benches/`.
