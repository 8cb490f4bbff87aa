//! Structure-regularized attention for convolutional networks.
//!
//! The crate provides a small `f64` tensor, convolution and normalization
//! kernels, the local attention and mode attention operations with
//! hand-written backward passes, the residual block that combines them, the
//! diversity regularizer, and the machinery used to verify all of it
//! (brute-force oracles, a finite-difference gradient checker and an
//! analytic FLOPs/parameter counter).

pub mod block;
pub mod error;
pub mod local_attention;
pub mod losses;
pub mod mode_attention;
pub mod network;
pub mod nonlocal;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Result, StraError};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
