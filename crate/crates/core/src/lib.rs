//! Egocentric 3D human pose at desk scale: a two-stage pipeline (Gaussian
//! heatmap detection, then a dual-branch lifting autoencoder) with its own
//! tensor/autodiff substrate, fish-eye camera model, procedural synthetic
//! dataset generator, and evaluation harness.

pub mod camera;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod nn;
pub mod optim;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
