//! Semantic label alignment for context-aware human activity recognition.
//!
//! Sensor windows are turned into handcrafted feature vectors, encoded by a
//! small MLP and projected into a vector space shared with projected language
//! model embeddings of the activity and context labels. Label relevance is the
//! dot product between the two projections; mutually exclusive context labels
//! are trained with cross-entropy and co-occurring activity labels with binary
//! cross-entropy.
//!
//! Module map:
//!
//! - [`dataio`]: label schemas, feature-CSV datasets, conflict filtering, splits
//! - [`signal`]: windowing, Fourier resampling, feature extraction, normalization
//! - [`labels`]: template sentences, embedding tables, target encoding
//! - [`nn`]: dense layers, backpropagation, RAdam, learning-rate schedule
//! - [`align`]: the alignment model, its losses, training and a binary-head baseline
//! - [`metrics`]: confusion counts, MCC, F1 and per-label reports
//! - [`hyperopt`]: Gaussian-process Bayesian optimization
//! - [`synth`]: synthetic datasets with a known Bayes oracle

pub mod align;
pub mod dataio;
pub mod error;
pub mod hyperopt;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
