//! Layer math for the volumetric classifier: forward and backward passes of
//! every layer kind, the loss and weight initialization.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod init;
mod loss;
mod pool;

pub use activation::{relu_backward, relu_forward, sigmoid};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, update_running,
    BatchNormCache, BatchNormGrads, BatchNormParams, BN_EPS, BN_MOMENTUM,
};
pub use conv::{conv3d_backward, conv3d_forward, conv_param_count, ConvGrads, ConvParams};
pub use dense::{dense_backward, dense_forward, flatten, unflatten, DenseGrads, DenseParams};
pub use init::{glorot_limit, glorot_uniform};
pub use loss::{bce_on_probabilities, bce_term, bce_with_logits};
pub use pool::{maxpool3d_backward, maxpool3d_forward, PoolOutput};
