//! Raw tensor kernels for the differentiable volumetric primitives. The
//! graph-recording wrappers live in [`crate::autodiff`].

pub mod activation;
pub mod conv;
pub mod grn;
pub mod labels;
pub mod loss;
pub mod norm;

pub use activation::{gelu_forward, softmax_channels};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvSpec};
pub use grn::{grn_forward, GrnDivisor, GRN_EPS};
pub use labels::downsample_labels;
pub use loss::{dice_ce_forward, DiceCeTerms, DICE_SMOOTH};
pub use norm::{instance_norm_forward, INSTANCE_NORM_EPS};
