//! Bottleneck-transformer building blocks on a small deterministic tensor
//! engine: 2D multi-head self-attention with split relative position
//! encodings, BoT / strided-BoT / Non-Local / Squeeze-Excitation blocks,
//! ResNet / BoTNet / BoTNet-S1 / SENet backbone builders, and an exact
//! parameter and multiply-add cost model.
//!
//! Kernels are generic over [`Scalar`] (`f32` for inference, `f64` for
//! verification); the aliases below name the two concrete instantiations.

pub mod attention;
pub mod backbone;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod graph;
pub mod io;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{grad_check, vjp, Ctx, Eager, GradCheckReport, Gradients, Op, Tape, Var};
pub use ops::Activation;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Inference-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Differentiable graph used by gradient checks.
pub type Tape64 = Tape<f64>;
