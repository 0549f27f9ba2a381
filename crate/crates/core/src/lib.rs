//! Bag-of-visual-words classification of retinal fundus images into
//! normal, drusen and exudate.
//!
//! The pipeline: [`imgcore`] loads and resizes, [`preprocess`] normalizes
//! the green channel, one of [`surf`], [`hog`] or [`lbp`] extracts local
//! descriptors, [`codebook`] clusters them into visual words, [`encoder`]
//! builds per-image histograms and [`svm`] classifies them. [`eval`] runs
//! the cross-dataset experiments.

pub mod codebook;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod hog;
pub mod imgcore;
pub mod lbp;
pub mod preprocess;
pub mod surf;
pub mod svm;
pub mod synth;

pub use error::{Error, Result};
pub use features::{DescriptorKind, FeatureMatrix, FeatureSet};
