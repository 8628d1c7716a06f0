//! Speaker-embedding toolkit built around a hybrid 2D/1D convolutional
//! embedding extractor.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`audio`] — WAV ingestion, spectral features, masking and augmentation.
//! 2. [`tensor`] — dense f64 tensors with reverse-mode automatic differentiation.
//! 3. [`model`] — the embedding network: local 2D-conv stages, a global 1D-conv
//!    module, attentive statistics pooling, and a 192-d embedding head.
//! 4. [`train`] — subcenter additive-angular-margin training with margin-mixup,
//!    cyclical learning rates, and variable-length fine-tuning.
//! 5. [`score`] — trial scoring: cosine, adaptive s-norm, duration-aware
//!    calibration, EER/MinDCF.
//! 6. [`interp`] — model inspection: effective receptive fields, neuron
//!    conductance, and input-masking ablation sweeps.
//! 7. [`synth`] + [`cli`] — synthetic desk-scale corpora and the command-line
//!    front end.

pub mod audio;
pub mod cli;
pub mod error;
pub mod interp;
pub mod model;
pub mod rng;
pub mod score;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
