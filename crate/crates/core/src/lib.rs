//! Coflow scheduling in N x N input-queued crossbar switches.

pub mod analysis;
pub mod cli;
pub mod engine;
pub mod matching;
pub mod schedulers;
pub mod traffic;
pub mod tuning;
