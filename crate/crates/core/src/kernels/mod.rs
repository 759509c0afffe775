//! Forward and backward numerical kernels.

mod activation;
mod adam;
mod conv;
mod gradcheck;
mod loss;

pub use activation::{prelu_backward, prelu_forward};
pub use adam::{adam_step, AdamState};
pub use conv::{
    conv2d_backward, conv2d_forward, convtranspose2d_backward, convtranspose2d_forward,
    reference, ConvGrads, ConvSpec,
};
pub use loss::mse_loss;
pub use gradcheck::{finite_difference_grad, max_relative_error, random_tensor};
pub(crate) use gradcheck::uniform_symmetric;
