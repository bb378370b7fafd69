//! Attention-free vision backbone built around a patch-wise RBF
//! Kolmogorov–Arnold token mixer, with hand-derived gradients, an analytic
//! cost model and a small training stack.

pub mod backbone;
pub mod complexity;
pub mod error;
pub mod grad;
pub mod kan;
pub mod mixer;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use backbone::{Backbone, BackboneConfig};
pub use error::{Error, Result};
pub use params::{Param, ParamMut, Parameterized};
pub use scalar::{Counted, Scalar};
pub use tensor::{Axis, Tensor};
