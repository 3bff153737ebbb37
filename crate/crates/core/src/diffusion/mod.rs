//! Gaussian diffusion over feature vectors: noise schedule, the vectorized
//! U-Net denoiser and the reverse-process sampler.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{timestep_embedding, CondInject, DenoiserConfig, DenoiserParams, Gradients, InputGrads, Tape};
pub use sampler::{p_sample_step, sample, sample_batch, MeanParam};
pub use schedule::{build_schedule, NoiseSchedule, BETA_END, BETA_START};
