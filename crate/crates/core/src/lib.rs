//! Selective state-space sequence models for multi-agent policies.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below name the two concrete instantiations: double precision for
//! verification and training, single precision for timing.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod ssm;

pub use error::{Error, Result};
pub use model::{
    init_model, AttentionModel, DecodeMode, DecodeStrategy, JointDecision, JointPolicy, MamModel, ModelConfig,
    ModelKind, PolicyOutput,
};
pub use numerics::{Array, Bound, ParamId, ParamSet, Tape, Var};
pub use scalar::{DType, Scalar};
pub use ssm::Discretization;

pub type Array64 = Array<f64>;
pub type Array32 = Array<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type MamModel64 = MamModel<f64>;
pub type MamModel32 = MamModel<f32>;
pub type AttentionModel64 = AttentionModel<f64>;
pub type AttentionModel32 = AttentionModel<f32>;
