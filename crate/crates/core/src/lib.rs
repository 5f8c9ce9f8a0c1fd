//! Multi-scale temporal transformer for short facial-expression clips.
//!
//! A per-frame CNN yields several feature scales; each scale is cut into
//! `N` patches and embedded with a per-frame positional code; transformer
//! blocks attend only across frames within one patch position; stage outputs
//! are fused by addition into the next scale; the final tokens are averaged
//! and classified.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod melayer;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod tformer;
pub mod training;

pub use backbone::{Backbone, FeaturePyramid};
pub use config::{BackboneConfig, ModelConfig, RunConfig, StageSpec, TrainSchedule};
pub use error::{Error, Result};
pub use melayer::{MELayer, TokenGrid};
pub use metrics::ConfusionMatrix;
pub use model::{Diagnostics, Msstnet};
pub use numerics::{Param, Rng, Sgd, Tape, Tensor, Var};
pub use params::Parameters;
pub use tformer::{AttentionRecord, TFormerBlock};
