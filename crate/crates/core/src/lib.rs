//! Unified variational autoencoder and latent diffusion for small 3D
//! molecules.
//!
//! Atom types, bonds and coordinates are compressed into one latent vector
//! per atom by a relational-attention encoder ([`uae`]); a diffusion
//! transformer with adaptive layer norm ([`udm`]) learns to generate those
//! latents; [`metrics`] scores decoded samples.

pub mod autograd;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod molio;
pub mod netblocks;
pub mod tensor;
pub mod uae;
pub mod udm;

pub use error::{Error, Result};
pub use tensor::Tensor;
