//! Prototype-bank anomaly detection with geometry-consistent routing.
//!
//! Each product category gets a frozen bank of patch prototypes chosen by
//! greedy k-center selection. A test image with unknown category is routed to
//! the bank that minimizes its accumulated nearest-prototype distance, and only
//! that head produces the anomaly map and image score. The [`harness`] module
//! drives the sequential continual protocol on top of these pieces.

pub mod bank;
pub mod config;
pub mod coreset;
pub mod error;
pub mod feature_store;
pub mod gcrf;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod routing;
pub mod scoring;
pub mod synth;

pub use bank::{BankMeta, EmaConfig, PrototypeBank};
pub use config::RunConfig;
pub use coreset::{select_coreset, Coreset, CoresetConfig};
pub use error::{GcrError, Result};
pub use feature_store::{
    load_manifest, DatasetManifest, ManifestEntry, PatchFeatureMap, PixelMask, Split,
};
pub use harness::{BaseMetric, ProtocolConfig};
pub use matrix::Matrix;
pub use metrics::{EvalMatrix, ScoredSet};
pub use pipeline::{AnomalyResult, ImageInput};
pub use routing::{Normalize, RoutingConfig, RoutingDecision, RoutingRule};
pub use scoring::{Aggregation, ScoreForm, ScoreMap, ScoringConfig};
