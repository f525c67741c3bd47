//! Simulation core for over-the-air federated fine-tuning behind a
//! repositionable receive/transmit antenna array.
//!
//! The crate is organized bottom-up: numeric utilities and deterministic RNG
//! streams, the physical layer (array geometry, fading, rates), resource
//! accounting, the learning loop with analog aggregation, the joint
//! positioning/beamforming solver, participant scheduling policies, and the
//! experiment harness with its on-disk log formats.
//!
//! All core math is generic over the scalar type through [`scalar::Scalar`];
//! the orchestration layer and the type aliases exported at the crate root
//! fix `f64`.

pub mod antenna;
pub mod config;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod linalg;
pub mod metrics;
pub mod resource;
pub mod rng;
pub mod scalar;
pub mod runlog;
pub mod scheduler;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Complex sample at the default precision.
pub type Cf64 = num_complex::Complex<f64>;
/// Array geometry at the default precision.
pub type Geometry = channel::ArrayGeometry<f64>;
/// Channel snapshot at the default precision.
pub type Link = channel::LinkState<f64>;
/// Beamformer at the default precision.
pub type Beam = channel::Beamformer<f64>;
