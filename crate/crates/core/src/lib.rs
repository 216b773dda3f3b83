//! Multi-modal network twins: encoders, fusion operators and decoders,
//! federated multi-area mapping with mean or gated adaptive aggregation, and
//! twin transfer, merge and split evaluated by normalized MSE.

pub mod error;
pub mod exec;
pub mod experiment;
pub mod federation;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod scenario;
pub mod twin;

pub use error::{Error, Result};
