//! Multimodal stroke prediction from retinal scans and clinical records.
//!
//! The crate covers the whole pipeline: a synthetic population generator,
//! cohort rules, temporal labelling, clinical features, a small
//! differentiable network with analytic gradients, the supervised and
//! contrastive objectives, augmentation, training and hyperparameter search,
//! and the evaluation metrics and report tables.

pub mod augment;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod labeling;
pub mod losses;
pub mod nn;
pub mod records;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
