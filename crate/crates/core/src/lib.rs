//! Spatial generalized-extreme-value models with latent Gaussian-process
//! random effects, fitted by nested Laplace approximation.

pub mod dataio;
pub mod error;
pub mod gev;
pub mod kernel;
pub mod laplace;
pub mod linalg;
pub mod model;
pub mod metropolis;
pub mod par;
pub mod posterior;
pub mod simstudy;

pub use error::{Error, ErrorCategory, Result};
pub use gev::{GevParams, Shape};
pub use kernel::{Coord, CovMatrix, KernelConfig, KernelForm};
pub use model::{GevGpModel, Hypers, KernelSettings, LatentField, LatentGp, ModelSpec, SiteDataset, Transform};
