//! Hierarchical common spatial patterns for eight-gesture motor-imagery
//! decoding.
//!
//! The pipeline: band-pass filter each trial ([`preprocess`]), cut it into
//! one-second evidence intervals, fit one CSP + Fisher-LDA + Gaussian
//! classifier per hierarchy level ([`csp`], [`scoring`], [`model`]), fuse the
//! level likelihoods into a posterior over the eight leaves and decide with a
//! confidence threshold ([`fusion`]). [`synthgen`] produces datasets with known
//! class structure and [`eval`] runs leave-one-out evaluation and grid search.

pub mod config;
pub mod csp;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hierarchy;
mod matrix_serde;
pub mod model;
pub mod preprocess;
pub mod scoring;
pub mod synthgen;

pub use config::{GridSpec, PriorSpec, RunConfig};
pub use dataio::{Dataset, Trial, TrialMatrix, TrialMeta};
pub use error::{HcspError, Result};
pub use fusion::{EpochDecision, GesturePMF, InterLevelPrior};
pub use hierarchy::{GestureClass, LevelId};
pub use model::{ClassifierTopology, HcspModel, LevelClassifier};
pub use preprocess::EvidenceMode;
pub use scoring::LdaMode;
pub use synthgen::SynthConfig;
