//! Staged command-line pipeline: synthetic data, cohort, labels, features,
//! pretraining, hyperparameter search, fine-tuning, evaluation and report.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
