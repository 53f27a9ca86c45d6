//! Noise schedule, forward/reverse diffusion steps and edit-friendly
//! inversion with exact reconstruction.

mod inversion;
mod schedule;
mod steps;

pub(crate) use inversion::eps_checked;
pub use inversion::{
    edit_friendly_invert, gaussian, reconstruct, reconstruct_from, Denoiser, DiffusionTrajectory,
    FnDenoiser,
};
pub use schedule::{FinalSigma, NoiseSchedule};
pub use steps::{forward_sample, posterior_mean, predict_x0, reverse_step};
