//! Fine-grained text-to-motion diffusion at desk scale.
//!
//! The crate contains a complete pipeline: a reverse-mode tensor engine,
//! a synthetic stage-by-body-part motion dataset, a trainable text encoder,
//! a linear-complexity attention core with time-anchored global templates
//! and sparsely activated experts, a denoising-diffusion trainer and
//! sampler with zero-shot temporal composition, an LLM-mediated script
//! editing loop, and a contrastive-feature evaluation suite.
//!
//! All numeric code is generic over the scalar type (`f32` for training,
//! `f64` for verification); concrete aliases live at the crate root.

pub mod diffusion;
pub mod editing;
pub mod error;
pub mod hash;
pub mod numerics;
pub mod attention;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod schema;
pub mod textenc;

pub use error::{CoreError, Result};
pub use numerics::{Graph, Scalar, Tensor, Var};

/// Single-precision tensor (training).
pub type Tensor32 = numerics::Tensor<f32>;
/// Double-precision tensor (gradient and identity verification).
pub type Tensor64 = numerics::Tensor<f64>;
/// Single-precision computation tape.
pub type Graph32 = numerics::Graph<f32>;
/// Double-precision computation tape.
pub type Graph64 = numerics::Graph<f64>;
