//! Iterative point-cloud denoising with selective state-space encoders,
//! dynamic graph convolutions and a differentiable point renderer.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod net;
pub mod patch;
pub mod render;
pub mod rng;
pub mod ssm;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{Normalization, Point3, PointCloud, TriangleMesh};
pub use model::Model;
