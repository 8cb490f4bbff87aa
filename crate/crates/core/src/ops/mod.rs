//! Dense numeric building blocks shared by the attention modules.

pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod softmax;

pub use batchnorm::{batch_norm, BatchNorm, BatchStats, BnCache, BnMode};
pub use conv::{conv2d_grouped, conv2d_grouped_backward, Conv2d, ConvGrads, ConvSpec};
pub use init::seeded_init;
pub use linear::Linear;
pub use softmax::{sigmoid, sigmoid_scalar, softmax, softmax_backward};
