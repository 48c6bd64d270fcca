//! Perceptual attacks on no-reference image quality models.
//!
//! The crate bundles a small reverse-mode differentiation tape ([`tensor`]),
//! differentiable full-reference distances ([`fidelity`]), three no-reference
//! quality model families with logistic calibration ([`quality`]), the
//! Lagrangian steepest-ascent attack ([`attack`]), robustness metrics
//! ([`evaluation`]) and the yes-no screening session logic ([`study`]).

pub mod attack;
mod error;
pub mod evaluation;
pub mod extractor;
pub mod fidelity;
pub mod gradcheck;
pub mod imageio;
pub mod quality;
pub mod study;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use attack::{AttackConfig, Candidate, CandidateSet, CandidateStatus};
pub use error::{Error, Result};
pub use extractor::FeatureExtractor;
pub use fidelity::{AscentNorm, FidelityMeasure, MeasureKind};
pub use quality::{CalibrationParams, ModelKind, QualityModel};
pub use tensor::{Graph, ImageTensor, Shape, Tensor, TensorError, Var};
pub use weights::{WeightError, WeightFile};
