//! Hierarchical manager/worker decoding for topic-planned multi-sentence
//! generation.
//!
//! A Manager LSTM plans one topic distribution per image slot; a
//! semantic-compositional Worker decodes one sentence per slot conditioned on
//! that topic. Training covers maximum-likelihood, self-critical policy
//! gradients with CIDEr-D sentence rewards, a mixed objective, and a joint
//! objective that backpropagates Worker losses into the Manager.
//!
//! Everything runs in f64 on a reverse-mode tape ([`diffcore`]) small enough
//! to verify every gradient against finite differences.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod evalgen;
pub mod manager;
pub mod metrics;
pub mod topics;
pub mod training;
pub mod worker;

pub use error::{HsrlError, Result};
