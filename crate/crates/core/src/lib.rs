//! Ptychographic phase retrieval with normalizing-flow posterior surrogates.
//!
//! The crate covers the full pipeline: scan geometry and synthetic samples,
//! the far-field forward model and noisy simulation, an invertible flow
//! trained against the variational objective, a deterministic rPIE baseline,
//! and posterior analysis (mean/SD maps, modes, image-quality metrics).

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod objective;
pub mod physics;
pub mod rpie;
pub mod trainer;

pub use error::{Error, Result};
