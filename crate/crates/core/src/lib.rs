//! Multi-modal test-time adaptation for two-branch point segmentation.
//!
//! The crate contains a small dense-tensor engine with reverse-mode
//! gradients ([`tensor`], [`batchnorm`], [`tape`]), the 2D/3D model with
//! source, fast and slow normalization roles ([`model`]), the adaptation
//! objectives and pseudo-label refinement ([`tta`]), a synthetic domain-shift
//! generator ([`synth`]) and the experiment harness ([`harness`]).

pub mod batchnorm;
mod binio;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tta;

pub use batchnorm::{batchnorm_forward, BnMode, BnState};
pub use error::{Error, Result};
pub use tape::{GradTape, Gradients};
pub use tensor::{linear_forward, relu, softmax_rows, Scalar, Tensor};
