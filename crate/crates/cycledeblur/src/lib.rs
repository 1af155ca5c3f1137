//! Cycle-consistent adversarial motion deblurring toolkit.
//!
//! The crate covers the whole pipeline: synthetic motion blur (random camera
//! trajectories splatted into convolution kernels), two generator
//! architectures plus patch discriminators with hand-written backward passes,
//! a combined adversarial + perceptual cycle objective, an Adam trainer with
//! resumable checkpoints, and full-reference image quality metrics.
//!
//! All numeric code is generic over [`Real`] so the same pipeline runs at
//! `f32` for throughput and at `f64` for gradient checks and bit-exact
//! resume tests.

pub mod blur;
pub mod data;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod params;
pub mod perceptual;
pub mod scalar;
pub mod store;
pub mod trainer;

pub use img::{Image, NormalizedImage};
pub use scalar::Real;

/// Concrete aliases for the two supported precisions.
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Kernel = blur::BlurKernel;
pub type Generator32 = networks::Generator<f32>;
pub type Generator64 = networks::Generator<f64>;
pub type Discriminator32 = networks::Discriminator<f32>;
pub type Discriminator64 = networks::Discriminator<f64>;
