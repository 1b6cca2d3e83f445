//! Cross-modal retrieval that stays robust when part of the training pairs
//! are mismatched.
//!
//! Two small encoder pairs are co-trained. Each network's contrastive losses
//! are weighted by soft correspondence labels that the *other* network
//! estimates from two kinds of structure: how dominant a pair's own
//! similarity is across modalities, and how consistent the image's and the
//! text's neighbourhoods are within their own modality.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: matrices, softmax, Adam, seeded RNG
//! * [`synthdata`]: clustered paired data with exact-rate mismatch injection
//! * [`model`]: MLP encoders with unit-norm outputs and manual backprop
//! * [`discrimination`]: correspondence indicators, GMM, label ensembling
//! * [`losses`]: purified contrastive losses, gradients, finite-difference check
//! * [`trainer`]: the dual-network training loop and ablation modes
//! * [`evalmetrics`]: Recall@K, detection accuracy/AUC, report files
//! * [`cli`]: the `gsc` command-line front end

pub mod cli;
pub mod discrimination;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{GscError, Result};
