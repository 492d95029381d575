//! Universal adversarial perturbations against image-text dual encoders.
//!
//! The crate is a self-contained test bed: a procedural image-caption corpus,
//! a zoo of small dual-encoder retrieval models trained from scratch, a
//! perturbation generator conditioned on the opposite modality, and an
//! evaluation harness measuring how one universal image perturbation plus one
//! universal adversarial word degrade retrieval across victim models that
//! never saw the attack.
//!
//! Everything is deterministic given a seed: corpora, checkpoints, attack
//! artifacts, and reports are byte-identical across runs.

pub mod attack;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kv;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
