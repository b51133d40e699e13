//! Multi-label classification of malware traffic carried over Tor.
//!
//! The crate covers the whole offline pipeline: turning traffic logs into
//! fixed-layout feature vectors, generating synthetic corpora with planted
//! class signals, training tree-based multi-label baselines and a label
//! message passing network, scoring them, attributing their outputs to
//! features with Shapley values, and probing them with percentile-based
//! evasion perturbations.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evasion;
pub mod explain;
pub mod featurizer;
pub mod lamp;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthgen;

pub use dataset::{
    Dataset, FeatureDescriptor, FeatureGroup, FeatureSchema, Label, LabelGraph, LabelSet,
    TraceSample, NUM_FEATURES, NUM_LABELS,
};
pub use error::{Error, Result};
