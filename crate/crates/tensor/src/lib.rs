//! Dense row-major tensors with a reverse-mode autodiff tape.
//!
//! Every op records a closure mapping the output gradient to parent
//! gradients; [`Tensor::backward`] walks the tape in reverse topological
//! order. Kernels are generic over [`Element`] and dispatch on the runtime
//! [`DType`], so f32 training and f64 checking share one code path.

mod dtype;
mod error;
pub mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use dtype::{DType, Element, Storage};
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, relative_error, GradCheck};
pub use rng::{Rng, RngState};
pub use tensor::{grad_enabled, no_grad, Tensor};

#[doc(hidden)]
pub mod __scalar_traits {
    pub use num_traits::{Float as _, One as _, Zero as _};
}
