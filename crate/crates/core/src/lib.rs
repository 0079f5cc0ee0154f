//! Federated-learning simulator with proactive poisoning detection.
//!
//! The crate is organised bottom-up: [`gradvec`] numeric primitives,
//! [`tasks`] for data and local training, [`defenses`] for robust
//! aggregation rules, [`attacks`] for model poisoning, [`recess`] for the
//! probe-based trust defense, and [`harness`] for the round loop, metrics
//! and file outputs.

pub mod error;
pub mod gradvec;
pub mod harness;
pub mod par;
pub mod rng;
pub mod attacks;
pub mod defenses;
pub mod recess;
pub mod tasks;

pub use error::{Error, Result};
pub use gradvec::GradientVector;
