//! Noise schedule, forward process, U-Net denoiser, training loss and the
//! fused-guidance DDIM sampler.

mod loss;
mod sampler;
mod schedule;
mod unet;

pub use loss::{diffusion_loss, draw_noise, training_loss, NoiseDraw};
pub use sampler::{sample, sample_batch, sample_traced, SamplerConfig, Trajectory};
pub use schedule::{fused_epsilon, make_schedule, NoiseSchedule, ScheduleConfig};
pub use unet::{timestep_embedding, Denoiser};
