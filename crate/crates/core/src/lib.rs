//! Spherical-harmonics Dirac-delta (SHDD) location encoding, the reverse-KL
//! mode-seeking decoder built on it, and a conditional latent diffusion
//! model that generates locations in that encoding space.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command-line tool and the checkpoints use.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geo;
pub mod nn;
pub mod scalar;
pub mod shdd;
pub mod sphharm;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use sphharm::Degree;

pub type SphericalPoint = sphharm::SphericalPoint<f64>;
pub type ShddEncoding = shdd::ShddEncoding<f64>;
pub type AnchorSet = shdd::AnchorSet<f64>;
pub type SphericalDistribution = shdd::SphericalDistribution<f64>;
pub type CsUnet = nn::CsUnet<f64>;
pub type AdamState = nn::AdamState<f64>;
pub type TrainSet = diffusion::TrainSet<f64>;
pub type Prediction = diffusion::Prediction<f64>;
pub type ShddLookup = data::ShddLookup<f64>;
