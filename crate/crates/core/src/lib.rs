//! Video-level traffic accident detection.
//!
//! The pipeline turns a clip (a directory of ordered frames) into a
//! `T x D` sequence of frame features, optionally enriched with dense
//! optical-flow motion cues, and classifies the whole clip with a small
//! transformer encoder:
//!
//! ```text
//! frames -> sample/resize -> {rgb | flow color | flow overlay} -> CNN features
//!        -> linear projection + sinusoidal positions -> masked encoder
//!        -> masked temporal mean -> linear head -> {normal, accident}
//! ```
//!
//! Modules map onto pipeline stages: [`dataio`] (manifests, frames, AVFX
//! feature files), [`optflow`], [`featx`], [`model`], [`train`], [`eval`]
//! and [`synth`] for generating labelled toy clips.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod eval;
pub mod featx;
pub mod fsutil;
pub mod model;
pub mod optflow;
pub mod seed;
pub mod synth;
pub mod train;

pub use dataio::{ClipManifestEntry, FeatureSequence, Split};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, MetricsReport};
pub use featx::{Modality, ModalitySpec, PreprocConfig};
pub use model::{ModelConfig, ModelParams, PaddedBatch};
pub use optflow::{FlowField, FlowParams};
pub use train::{Checkpoint, TrainConfig};
