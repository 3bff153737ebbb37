//! Cross-domain diffusion recommender for cold-start users.
//!
//! Target-domain user features are generated by a conditional denoising
//! diffusion model: side users (target-only) teach the unconditional
//! target distribution, overlapping users teach the auxiliary-to-target
//! transfer, and cold-start users get a feature sampled under their
//! auxiliary feature as condition. Items are scored by dot product.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
