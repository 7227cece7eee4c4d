//! Scheduler-level diffusion math, independent of any concrete denoiser.

mod ddim;
mod grid;
mod schedule;

pub use ddim::{
    add_noise, ddim_invert, ddim_invert_step, ddim_invert_with, ddim_sample, ddim_step,
    Fingerprint, InversionOptions, Trajectory, INVERSION_GUIDANCE,
};
pub use grid::{LatentGrid, PixelImage, SpaceTag};
pub use schedule::{NoiseSchedule, ScheduleConfig, DEFAULT_NUM_STEPS};
