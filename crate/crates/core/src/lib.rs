//! XFeat-style local features: a featherweight CNN backbone, keypoint and
//! reliability heads, match refinement, training losses and homography
//! evaluation, on a small deterministic CPU tensor library.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod image;
pub mod io;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, XFeatModel};
pub use tensor::Tensor;
