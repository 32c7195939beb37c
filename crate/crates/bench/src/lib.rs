//! Benchmark-only crate; see `benches/market.rs`.
