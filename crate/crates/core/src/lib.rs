//! Relative-advantage debiasing of watch-time feedback.
//!
//! Raw watch times are converted into cohort-relative quantile labels
//! (video-side, user-side within duration bins, and their probit-space
//! fusion), a stage-2 MLP learns those labels from ids, and predictions are
//! scored with pairwise ranking metrics. A learned multiquantile model can
//! stand in for the stored per-cohort watch-time histories, and a synthetic
//! generator with known latent preference backs the statistical checks.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Every reduction is performed in a fixed order, so results are identical
//! with and without the feature and across thread counts.

pub mod cluster;
pub mod data;
pub mod distembed;
pub mod ecdf;
mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod preference;
pub mod seed;
pub mod synth;

pub use error::{RadError, Result};
