//! Criterion benchmark host crate; see `benches/engine.rs`.
