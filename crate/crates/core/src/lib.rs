//! Core library for classifying response clarity and evasion in political interviews.

pub mod dataset;
pub mod ensemble;
pub mod evaluation;
pub mod predictions;
pub mod preprocessing;
pub mod rng;
pub mod splitting;
pub mod taxonomy;
pub mod training;
pub mod zeroshot;
