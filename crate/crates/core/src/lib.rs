//! Localizing a single object with nothing but a whole-image classifier.
//!
//! The search blackens and crops candidate regions, asks the classifier how
//! much of its original top-K response survives each edit, and narrows in on
//! the region the classifier responds to most. Around it sit a synthetic
//! oracle classifier, an adapter for serialized pre-trained networks, a
//! VOC-style evaluation harness and the `eiss` command-line tool.
//!
//! Intensities, probabilities and scores are generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix the common choices.

pub mod classifier;
pub mod cli;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod scalar;

pub use classifier::{Classifier, OracleClassifier, OracleParams, PretrainedClassifier, ResponseVector};
pub use engine::{run_eiss, BlackenedRanking, EissConfig, EissResult, IterationRecord, StopReason, TopKReference};
pub use error::{Error, Result};
pub use geometry::Region;
pub use imaging::{Image, SyntheticSpec};
pub use scalar::Scalar;

pub type ImageF32 = Image<f32>;
pub type ImageF64 = Image<f64>;
pub type ResponseVectorF32 = ResponseVector<f32>;
pub type ResponseVectorF64 = ResponseVector<f64>;
pub type EissResultF32 = EissResult<f32>;
pub type EissResultF64 = EissResult<f64>;
pub type ReportF32 = evaluation::EvaluationReport<f32>;
pub type ReportF64 = evaluation::EvaluationReport<f64>;
