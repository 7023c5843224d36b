//! Experiment harness for doubly-unlinked regression: configuration,
//! simulation studies and the real-data workflow behind the `unlinked`
//! binary.

pub mod config;
pub mod real;
pub mod study;
