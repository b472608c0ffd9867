//! Noise schedule, forward diffusion and the per-step reverse updates.
//!
//! Naming convention: the per-step increment `a[t]` is the variance added at
//! step `t`, i.e. `q(x_t | x_{t-1}) = N(sqrt(1 - a_t) x_{t-1}, a_t I)`, and
//! `alpha_bar[t] = prod_{i <= t} (1 - a_i)`. What many codebases call `beta_t`
//! is `a_t` here. Steps are 1-indexed; `alpha_bar(0)` is defined as 1.
//!
//! All schedule arithmetic runs in f64; image values are cast at the boundary.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::normal_f64;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    a: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear increments from `a_start` to `a_end` inclusive.
    pub fn linear(num_steps: usize, a_start: f64, a_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(a_start) || !in_unit(a_end) || a_start > a_end {
            return Err(Error::InvalidArgument(format!(
                "schedule endpoints must satisfy 0 < a_start <= a_end < 1, got {a_start}, {a_end}"
            )));
        }
        let a = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    a_start
                } else {
                    a_start + (a_end - a_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_increments(a)
    }

    /// Linear schedule whose endpoints are the usual 1000-step values rescaled
    /// by `1000 / T`, so short chains reach a comparable terminal `alpha_bar`.
    pub fn scaled_linear(num_steps: usize) -> Result<Self> {
        let (s, e) = default_endpoints(num_steps);
        Self::linear(num_steps, s, e)
    }

    pub fn from_increments(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let mut alpha_bar = Vec::with_capacity(a.len());
        let mut acc = 1.0f64;
        for (i, &ai) in a.iter().enumerate() {
            if !(ai > 0.0 && ai < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "increment a_{} = {ai} outside (0, 1)",
                    i + 1
                )));
            }
            acc *= 1.0 - ai;
            alpha_bar.push(acc);
        }
        Ok(Self { a, alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.a.len()
    }

    /// Increment `a_t` for `t` in `1..=T`.
    pub fn increment(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.a[t - 1])
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn increments(&self) -> &[f64] {
        &self.a
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.a.len() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.a.len(),
            });
        }
        Ok(())
    }

    /// Mean coefficients and variance of the DDPM posterior
    /// `q(z_{t-1} | z_t, z_0) = N(c0 * z_0 + ct * z_t, var)`, for `t >= 2`.
    pub fn posterior(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check_step(t)?;
        if t < 2 {
            return Err(Error::InvalidArgument(
                "posterior is only defined for t >= 2; t = 1 returns the x0 estimate".into(),
            ));
        }
        let a_t = self.a[t - 1];
        let ab_t = self.alpha_bar[t - 1];
        let ab_prev = self.alpha_bar[t - 2];
        let denom = 1.0 - ab_t;
        Ok(PosteriorCoefficients {
            x0: ab_prev.sqrt() * a_t / denom,
            xt: (1.0 - a_t).sqrt() * (1.0 - ab_prev) / denom,
            variance: a_t * (1.0 - ab_prev) / denom,
        })
    }
}

pub fn default_endpoints(num_steps: usize) -> (f64, f64) {
    let scale = 1000.0 / num_steps.max(1) as f64;
    let clamp = |v: f64| v.clamp(1e-8, 0.999);
    (clamp(1e-4 * scale), clamp(0.02 * scale))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub x0: f64,
    pub xt: f64,
    pub variance: f64,
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &Image, t: usize, eps: &Image, s: &NoiseSchedule) -> Result<Image> {
    check_pair(x0, eps)?;
    let ab = s.alpha_bar(t)?;
    s.check_step(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = (sa * *o as f64 + sn * e as f64) as f32;
    }
    Ok(out)
}

/// Inverts [`forward_diffuse`] given a noise estimate.
pub fn predict_x0(z_t: &Image, eps_hat: &Image, t: usize, s: &NoiseSchedule) -> Result<Image> {
    check_pair(z_t, eps_hat)?;
    s.check_step(t)?;
    let ab = s.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z_t.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
        *o = x0_value(*o as f64, e as f64, sa, sn) as f32;
    }
    Ok(out)
}

#[inline]
fn x0_value(z: f64, e: f64, sqrt_ab: f64, sqrt_one_minus_ab: f64) -> f64 {
    (z - sqrt_one_minus_ab * e) / sqrt_ab
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` lands on the x0
/// estimate). With `eta = 0` no randomness is drawn.
pub fn ddim_step<R: Rng + ?Sized>(
    z_t: &Image,
    eps_hat: &Image,
    t: usize,
    t_prev: usize,
    eta: f64,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Image> {
    check_pair(z_t, eps_hat)?;
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs t_prev < t, got t = {t}, t_prev = {t_prev}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
    }
    let ab_t = s.alpha_bar(t)?;
    let ab_p = s.alpha_bar(t_prev)?;
    let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sigma = if t_prev == 0 {
        0.0
    } else {
        eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt()
    };
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let sqrt_ab_p = ab_p.sqrt();
    let mut out = z_t.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
        let x0 = x0_value(*o as f64, e as f64, sa, sn);
        let mut v = if t_prev == 0 {
            x0
        } else {
            sqrt_ab_p * x0 + dir * e as f64
        };
        if sigma > 0.0 {
            v += sigma * normal_f64(rng);
        }
        *o = v as f32;
    }
    Ok(out)
}

/// Draw from the DDPM posterior given an x0 estimate. At `t = 1` the x0
/// estimate is returned unchanged.
pub fn ancestral_step<R: Rng + ?Sized>(
    z_t: &Image,
    z0_hat: &Image,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Image> {
    check_pair(z_t, z0_hat)?;
    s.check_step(t)?;
    if t == 1 {
        return Ok(z0_hat.clone());
    }
    let pc = s.posterior(t)?;
    let std = pc.variance.sqrt();
    let mut out = z_t.clone();
    for (o, &x0) in out.data_mut().iter_mut().zip(z0_hat.data()) {
        let mu = pc.x0 * x0 as f64 + pc.xt * *o as f64;
        *o = (mu + std * normal_f64(rng)) as f32;
    }
    Ok(out)
}
