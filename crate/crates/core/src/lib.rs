//! CuriGS core: curriculum-guided sparse-view Gaussian splatting.
//!
//! A CPU reference implementation of 3D Gaussian splatting trained from few
//! input views, where the missing supervision is replaced by a curriculum of
//! synthetic "student" viewpoints: each real training view acts as a teacher
//! whose pose is perturbed at progressively larger magnitudes, student views
//! are scored with reference-free and teacher-relative metrics, and the best
//! students are promoted into the training set as pseudo-ground-truth.
//!
//! Module map:
//! - [`geometry`]: camera poses, intrinsics, pose perturbation, student pools
//! - [`gaussians`]: primitive parameterization and projection
//! - [`rasterizer`]: tiled forward renderer and analytic backward pass
//! - [`metrics`]: PSNR/SSIM, Pearson depth loss, composite student scoring
//! - [`curriculum`]: perturbation schedule, student sampling, promotion
//! - [`training`]: losses, optimizer, densification, the training loop
//! - [`scene`]: synthetic scene generation, dataset IO, depth oracle
//! - [`image`]: image/scalar-map/mask containers with PNG + PFM IO

pub mod curriculum;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod rasterizer;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
