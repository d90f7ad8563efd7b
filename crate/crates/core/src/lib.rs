//! CAM-guided binary image classification.
//!
//! A small fully convolutional network with a GAP-linear head yields exact
//! class activation maps. Those maps drive three mechanisms:
//!
//! * [`snapmix`]: CAM-weighted box mixing of training pairs,
//! * [`cpe`]: a contrastive loss over the most and least relevant feature cells,
//! * [`tta`]: test-time masking of the most relevant patches with a flip vote.

pub mod autodiff;
pub mod cam;
pub mod checkpoint;
pub mod cpe;
pub mod data;
pub mod error;
pub mod imaging;
pub mod model;
pub mod snapmix;
pub mod tensor;
pub mod training;
pub mod tta;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
