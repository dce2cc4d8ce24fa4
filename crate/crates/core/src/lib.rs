//! Joint topic prediction and topic-refined dialogue response generation.
//!
//! A single small transformer is trained on three objectives at once: coarse
//! response generation, topic classification over the dialogue history, and
//! regeneration of the response conditioned on the coarse draft plus explicit
//! topic words. Inference runs the same three passes greedily.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix the two precisions used in practice.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod pipeline;
pub mod run;
pub mod scalar;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision parameters; used for every correctness check.
pub type Params64 = net::Params<f64>;
/// Single-precision parameters for faster runs.
pub type Params32 = net::Params<f32>;
pub type Model64 = net::JointModel<f64>;
pub type Model32 = net::JointModel<f32>;
pub type OptState64 = objective::OptState<f64>;
pub type OptState32 = objective::OptState<f32>;
