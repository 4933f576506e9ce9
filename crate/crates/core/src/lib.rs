//! EquiDiff: conditional denoising diffusion for vehicle trajectory
//! prediction with an SO(2)-equivariant vector-neuron transformer denoiser
//! and a rotation-invariant social-context encoder.

pub mod backbone;
pub mod context;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod params;
pub mod rng;
pub mod tensorcore;
pub mod vn;

pub use error::{Error, Result};
