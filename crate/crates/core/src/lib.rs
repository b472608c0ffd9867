//! Dual-condition diffusion trained on two unpaired datasets (image+text and
//! image+mask) and sampled with unified classifier-free guidance over any
//! combination of the two conditions.
//!
//! The crate is organised bottom-up:
//!
//! * [`schedule`]: noise schedule, forward diffusion, reverse-step arithmetic.
//! * [`conditioning`]: mask/text conditions and their null tokens.
//! * [`dataset`]: procedural toy-image and Gaussian-mixture corpora.
//! * [`nn`] and [`denoiser`]: a compact U-Net with hand-written backprop.
//! * [`train`]: joint training over the unpaired halves.
//! * [`sample`]: guided DDIM / ancestral sampling.
//! * [`oracle`]: closed-form Gaussian-mixture scores used as ground truth.
//! * [`metrics`]: rule segmenter, Dice, FS1/FS2, Fréchet distance, KID, alignment.
//! * [`config`] and [`cli`]: experiment configuration and command implementations.

pub mod cli;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod train;

pub use conditioning::{ConditionMode, ConditionPair, MaskCondition, TextCondition};
pub use error::{Error, Result};
pub use image::Image;
pub use schedule::NoiseSchedule;
