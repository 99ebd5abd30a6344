//! Asynchronous master-worker evolutionary search over small convolutional
//! classifiers, scored by validation F1 plus a normalized cost objective.

pub mod bench;
pub mod config;
pub mod data;
pub mod evaluator;
pub mod evolution;
pub mod fitness;
pub mod genome;
pub mod metrics;
pub mod nn;
pub mod pool;
pub mod run;
