//! Criterion benches for the core algorithms live in `benches/`.
