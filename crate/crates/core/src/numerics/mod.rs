//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The primitive set is deliberately small: it covers an attention encoder,
//! small MLPs, and the discrete and mixture-of-Gaussians likelihoods.

mod gemm;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_report, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use params::{ParamId, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softmax_into, BoolMask, Gradients, Tape, Var, LOG_FLOOR, MASK_FILL};
pub use tensor::Tensor;

/// Element type of every tensor. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dropout keep-probability {0} outside (0, 1]")]
    InvalidDropout(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}
