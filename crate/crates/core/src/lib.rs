//! Full-reference image quality assessment that adaptively combines a
//! fidelity term (reference vs. test feature statistics) with a
//! naturalness term (reference-free), so that a test image that looks more
//! natural than its reference is not penalised for deviating from it.
//!
//! Scores are "lower is better".

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fidelity;
pub mod model;
pub mod naturalness;
pub mod raster;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use backbone::{BackboneConfig, BackboneKind, BackboneParams, FeaturePyramid, StageFeatures};
pub use error::{Error, Result};
pub use fidelity::FidelityWeights;
pub use model::{
    adaptive_lambda, afine_breakdown, afine_score, calibrate, compose_score, AdaptiveScale, CalibrationParams,
    ModelParameters, ParamGroup, ParamMask, ScoreBreakdown,
};
pub use naturalness::NaturalnessHead;
pub use raster::Image;
