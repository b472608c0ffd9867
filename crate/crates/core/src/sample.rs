//! Guided reverse sampling over any combination of the two conditions.

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionPair;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Real;
use crate::rng::{named_stream, normal_vec};
use crate::schedule::{ancestral_step, ddim_step, predict_x0, NoiseSchedule};

/// Anything that maps `(z_t, t, condition)` batches to noise estimates.
pub trait NoisePredictor: Sync {
    fn predict(&self, inputs: &[(&Image, usize, &ConditionPair)]) -> Result<Vec<Image>>;
}

impl<T: Real> NoisePredictor for DenoiserParams<T> {
    fn predict(&self, inputs: &[(&Image, usize, &ConditionPair)]) -> Result<Vec<Image>> {
        self.forward_batch(inputs)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, inputs: &[(&Image, usize, &ConditionPair)]) -> Result<Vec<Image>> {
        (**self).predict(inputs)
    }
}

/// `(1 + w) * cond - w * uncond`.
pub fn cfg_combine<F: Float>(cond: F, uncond: F, w: F) -> F {
    (F::one() + w) * cond - w * uncond
}

/// Guided noise estimates for a batch sharing step `t`. The unconditional
/// term always uses the fully-null pair. At `w = 0` only the conditional pass
/// runs and at `w = -1` only the unconditional one.
pub fn cfg_epsilon<P: NoisePredictor + ?Sized>(
    model: &P,
    zs: &[Image],
    t: usize,
    conds: &[ConditionPair],
    w: f64,
) -> Result<Vec<Image>> {
    if zs.len() != conds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} states but {} conditions",
            zs.len(),
            conds.len()
        )));
    }
    if w < -1.0 || !w.is_finite() {
        return Err(Error::InvalidArgument(format!("guidance strength must be >= -1, got {w}")));
    }
    let nulls: Vec<ConditionPair> = conds.iter().map(|c| c.unconditional()).collect();
    if w == 0.0 {
        let inputs: Vec<_> = zs.iter().zip(conds).map(|(z, c)| (z, t, c)).collect();
        return model.predict(&inputs);
    }
    if w == -1.0 {
        let inputs: Vec<_> = zs.iter().zip(&nulls).map(|(z, c)| (z, t, c)).collect();
        return model.predict(&inputs);
    }
    let inputs: Vec<_> = zs
        .iter()
        .zip(conds)
        .map(|(z, c)| (z, t, c))
        .chain(zs.iter().zip(&nulls).map(|(z, c)| (z, t, c)))
        .collect();
    let mut out = model.predict(&inputs)?;
    let uncond = out.split_off(zs.len());
    let wf = w as f32;
    for (c, u) in out.iter_mut().zip(&uncond) {
        for (a, &b) in c.data_mut().iter_mut().zip(u.data()) {
            *a = cfg_combine(*a, b, wf);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SamplerKind {
    Ddim { steps: usize, eta: f64 },
    Ancestral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    /// Guidance strength `w >= -1`.
    pub w: f64,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Samples advanced together per model call.
    pub batch_size: usize,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            w: 1.75,
            sampler: SamplerKind::Ddim { steps: 50, eta: 0.0 },
            seed: 0,
            batch_size: 64,
        }
    }
}

impl GuidanceSpec {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(self.w >= -1.0) || !self.w.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "guidance strength must be >= -1, got {}",
                self.w
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("sampling batch size must be positive".into()));
        }
        if let SamplerKind::Ddim { steps, eta } = self.sampler {
            make_ddim_subsequence(num_steps, steps)?;
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
            }
        }
        Ok(())
    }
}

/// Decreasing steps `T - i * T / S` for `i` in `0..S`; the sampler then hops
/// from the last entry to 0.
pub fn make_ddim_subsequence(num_steps: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > num_steps {
        return Err(Error::InvalidArgument(format!(
            "DDIM step count must lie in 1..={num_steps}, got {s}"
        )));
    }
    Ok((0..s).map(|i| num_steps - i * num_steps / s).collect())
}

/// Runs the reverse chain for one sample per condition. Sample `i` draws its
/// initial state and step noise from its own stream, so outputs do not
/// depend on batching.
pub fn generate<P: NoisePredictor + ?Sized>(
    model: &P,
    spec: &GuidanceSpec,
    conds: &[ConditionPair],
    shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
) -> Result<Vec<Image>> {
    spec.validate(schedule.num_steps())?;
    let outs: Vec<Vec<Image>> = conds
        .chunks(spec.batch_size)
        .enumerate()
        .map(|(b, chunk)| generate_chunk(model, spec, chunk, b * spec.batch_size, shape, schedule))
        .collect::<Result<_>>()?;
    Ok(outs.into_iter().flatten().collect())
}

fn generate_chunk<P: NoisePredictor + ?Sized>(
    model: &P,
    spec: &GuidanceSpec,
    conds: &[ConditionPair],
    first: usize,
    shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
) -> Result<Vec<Image>> {
    let (h, w, c) = shape;
    let mut rngs: Vec<_> = (0..conds.len())
        .map(|i| named_stream(spec.seed, "sample", (first + i) as u64))
        .collect();
    let mut zs: Vec<Image> = rngs
        .iter_mut()
        .map(|r| Image::from_vec(h, w, c, normal_vec(r, h * w * c)))
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = match spec.sampler {
        SamplerKind::Ddim { steps, .. } => make_ddim_subsequence(schedule.num_steps(), steps)?,
        SamplerKind::Ancestral => (1..=schedule.num_steps()).rev().collect(),
    };
    for (k, &t) in steps.iter().enumerate() {
        let eps = cfg_epsilon(model, &zs, t, conds, spec.w)?;
        zs = zs
            .par_iter()
            .zip(eps.par_iter())
            .zip(rngs.par_iter_mut())
            .map(|((z, e), rng)| match spec.sampler {
                SamplerKind::Ddim { eta, .. } => {
                    let t_prev = steps.get(k + 1).copied().unwrap_or(0);
                    ddim_step(z, e, t, t_prev, eta, schedule, rng)
                }
                SamplerKind::Ancestral => {
                    let z0 = predict_x0(z, e, t, schedule)?;
                    ancestral_step(z, &z0, t, schedule, rng)
                }
            })
            .collect::<Result<_>>()?;
        if zs.iter().any(|z| z.first_non_finite().is_some()) {
            return Err(Error::NonFinite {
                what: "sampler state at step",
                index: t,
            });
        }
    }
    Ok(zs)
}
