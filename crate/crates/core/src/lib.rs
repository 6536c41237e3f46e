//! Sequential neural processes: data generators, a small reverse-mode
//! autodiff engine, and the 1D and 2D latent models trained on top of it.

pub mod autodiff;
pub mod dist;
pub mod error;
pub mod gp;
pub mod nn;
pub mod parallel;
pub mod scalar;
pub mod objective;
pub mod shapes2d;
pub mod snp1d;
pub mod tensor;
pub mod tgqn;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
