//! Generative bias models for ensemble debiasing of attention-based VQA
//! classifiers, plus a synthetic benchmark whose train and test answer priors
//! are inverted.
//!
//! A bias classifier is fed generator output in place of image features and
//! trained adversarially and by distillation to mimic the target classifier.
//! The target classifier is then trained on pseudo-labels that down-weight
//! answers the bias classifier already predicts confidently.

pub mod archive;
pub mod biasworld;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
