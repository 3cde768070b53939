//! Volumetric segmentation engine: a ConvNeXt-style 3-D encoder/decoder
//! with Global Response Normalization, trained with deep supervision on
//! patches and evaluated by sliding-window inference with DSC and NSD.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
