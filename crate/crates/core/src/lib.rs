//! Multi-scale adversarial training on Laplacian pyramids for contrast
//! enhancement.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pyramid;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageGrid;
pub use pyramid::LaplacianPyramid;
pub use tensor::{Element, Tensor};
