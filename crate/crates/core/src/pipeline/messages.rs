//! Point-to-point payloads between adjacent stages.

use exitpipe_tensor::Tensor;

use crate::schedule::Mb;

/// Hidden states `x_i` sent from stage `i` to stage `i+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMessage {
    pub mb: Mb,
    pub hidden: Tensor,
}

/// Gradient `g_i` of the downstream auxiliary loss with respect to `x_i`,
/// sent back from stage `i+1` to stage `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMessage {
    pub mb: Mb,
    pub grad: Tensor,
}
