//! Dense tensors and tape-based reverse-mode automatic differentiation.
//!
//! The floating width is fixed at build time through [`Real`]: 64-bit by
//! default, 32-bit with the `f32` cargo feature. Gradient checks assume the
//! 64-bit build.

mod functional;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use functional::{cross_entropy, entropy_rows, log_softmax};
pub use gradcheck::{
    central_difference, central_difference_4, finite_diff_check, max_relative_error,
    max_relative_error_floor,
};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Width of [`Real`] in bits, recorded in checkpoints.
pub const REAL_BITS: u32 = (std::mem::size_of::<Real>() * 8) as u32;
