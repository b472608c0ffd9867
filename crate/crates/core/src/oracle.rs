//! Closed-form scores of isotropic Gaussian mixtures under the forward
//! process, used as ground truth for the sampler and the learner.
//!
//! Everything here is f64.

use rand::Rng;
use serde::Serialize;

use crate::conditioning::ConditionPair;
use crate::dataset::GmmGrid;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{named_stream, normal_f64};
use crate::sample::{cfg_combine, generate, make_ddim_subsequence, GuidanceSpec, NoisePredictor, SamplerKind};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::InvalidArgument("mixture needs a component".into()))?;
        if dim == 0 || components.iter().any(|c| c.mean.len() != dim) {
            return Err(Error::InvalidArgument("component dimensions disagree".into()));
        }
        if components.iter().any(|c| !(c.weight > 0.0) || !(c.sigma > 0.0)) {
            return Err(Error::InvalidArgument("weights and sigmas must be positive".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    /// Equal-weight mixture with a shared sigma.
    pub fn uniform(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .map(|mean| Component {
                    weight: w,
                    mean,
                    sigma,
                })
                .collect(),
        )
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (a, &b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                pick = c;
                break;
            }
        }
        pick.mean.iter().map(|&m| m + pick.sigma * normal_f64(rng)).collect()
    }

    /// Per-component log of `weight * N(z; mean, sigma^2 I)`.
    fn log_terms(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let v = c.sigma * c.sigma;
                let sq: f64 = z.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln() - 0.5 * sq / v - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
            })
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(z))
    }

    /// `grad_z log p(z)`: responsibility-weighted component scores.
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let terms = self.log_terms(z);
        let lse = log_sum_exp(&terms);
        let mut s = vec![0.0; self.dim];
        for (c, lt) in self.components.iter().zip(&terms) {
            let r = (lt - lse).exp();
            let v = c.sigma * c.sigma;
            for ((si, &zi), &mi) in s.iter_mut().zip(z).zip(&c.mean) {
                *si -= r * (zi - mi) / v;
            }
        }
        s
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Marginal of the forward process at step `t`:
/// `(w, mu, sigma) -> (w, sqrt(ab) mu, sqrt(ab sigma^2 + 1 - ab))`.
pub fn diffused_mixture(m: &GaussianMixture, t: usize, s: &NoiseSchedule) -> Result<GaussianMixture> {
    let ab = s.alpha_bar(t)?;
    let components = m
        .components
        .iter()
        .map(|c| Component {
            weight: c.weight,
            mean: c.mean.iter().map(|&v| ab.sqrt() * v).collect(),
            sigma: (ab * c.sigma * c.sigma + 1.0 - ab).sqrt(),
        })
        .collect();
    Ok(GaussianMixture {
        components,
        dim: m.dim,
    })
}

pub fn exact_score(m: &GaussianMixture, z: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(m, z)?;
    Ok(diffused_mixture(m, t, s)?.score(z))
}

/// Minimum-MSE noise prediction `-sqrt(1 - ab) * score`.
pub fn optimal_eps(m: &GaussianMixture, z: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    let k = (1.0 - s.alpha_bar(t)?).sqrt();
    Ok(exact_score(m, z, t, s)?.into_iter().map(|v| -k * v).collect())
}

fn check_dim(m: &GaussianMixture, z: &[f64]) -> Result<()> {
    if z.len() != m.dim {
        return Err(Error::ShapeMismatch {
            expected: m.dim.to_string(),
            got: z.len().to_string(),
        });
    }
    Ok(())
}

/// Target distribution of a grid under a condition: a valid mask label keeps
/// one row, a valid text token keeps one column, nulls keep everything.
pub fn conditional_mixture(grid: &GmmGrid, cond: &ConditionPair) -> Result<GaussianMixture> {
    grid.validate()?;
    let row = if cond.mask.is_null() {
        None
    } else {
        let labels = cond.mask.labels();
        if labels.len() != 1 || labels[0] as usize >= grid.rows() {
            return Err(Error::InvalidArgument("mask does not name a grid row".into()));
        }
        Some(labels[0] as usize)
    };
    let col = if cond.text.is_null() {
        None
    } else {
        let tok = cond.text.token() as usize;
        if tok >= grid.cols() {
            return Err(Error::InvalidArgument(format!("token {tok} does not name a grid column")));
        }
        Some(tok)
    };
    let means = (0..grid.rows())
        .filter(|&r| row.is_none_or(|x| x == r))
        .flat_map(|r| {
            (0..grid.cols())
                .filter(move |&c| col.is_none_or(|x| x == c))
                .map(move |c| grid.means[r][c].clone())
        })
        .collect();
    GaussianMixture::uniform(means, grid.sigma)
}

/// The exact minimum-MSE denoiser of a Gaussian grid, usable in place of the
/// network.
pub struct OracleDenoiser {
    pub grid: GmmGrid,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, inputs: &[(&Image, usize, &ConditionPair)]) -> Result<Vec<Image>> {
        inputs
            .iter()
            .map(|(z, t, c)| {
                let m = conditional_mixture(&self.grid, c)?;
                let zv: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
                let e = optimal_eps(&m, &zv, *t, &self.schedule)?;
                Image::from_vec(z.height(), z.width(), z.channels(), e.iter().map(|&v| v as f32).collect())
            })
            .collect()
    }
}

/// One draw of the training regression problem.
#[derive(Clone, Debug)]
pub struct RegressionDraw {
    pub x0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub z_t: Vec<f64>,
}

pub fn regression_draws(m: &GaussianMixture, s: &NoiseSchedule, n: usize, seed: u64) -> Vec<RegressionDraw> {
    let mut rng = named_stream(seed, "oracle-draws", 0);
    (0..n)
        .map(|_| {
            let x0 = m.sample(&mut rng);
            let t = rng.random_range(1..=s.num_steps());
            let ab = s.alpha_bars()[t - 1];
            let eps: Vec<f64> = (0..m.dim).map(|_| normal_f64(&mut rng)).collect();
            let z_t = x0
                .iter()
                .zip(&eps)
                .map(|(&x, &e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                .collect();
            RegressionDraw { x0, t, eps, z_t }
        })
        .collect()
}

/// Mean per-element squared error of the optimal denoiser, with its standard
/// error.
pub fn optimal_loss(m: &GaussianMixture, s: &NoiseSchedule, draws: &[RegressionDraw]) -> Result<(f64, f64)> {
    let per: Vec<f64> = draws
        .iter()
        .map(|d| {
            let e = optimal_eps(m, &d.z_t, d.t, s)?;
            Ok(e.iter().zip(&d.eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m.dim as f64)
        })
        .collect::<Result<_>>()?;
    Ok(mean_and_stderr(&per))
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Self-normalised importance estimate of `E[eps | z_t]` using `n` prior
/// draws of `x0`. Returns the estimate and per-coordinate standard errors.
pub fn mc_conditional_eps(
    m: &GaussianMixture,
    z: &[f64],
    t: usize,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(m, z)?;
    let ab = s.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut rng = named_stream(seed, "oracle-mc", t as u64);
    let mut logw = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = m.sample(&mut rng);
        let e: Vec<f64> = z.iter().zip(&x0).map(|(&zi, &xi)| (zi - sa * xi) / sn).collect();
        logw.push(-0.5 * e.iter().map(|v| v * v).sum::<f64>());
        eps.push(e);
    }
    let lse = log_sum_exp(&logw);
    let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    let mut mean = vec![0.0; m.dim];
    for (wi, e) in w.iter().zip(&eps) {
        for (a, &b) in mean.iter_mut().zip(e) {
            *a += wi * b;
        }
    }
    let se = (0..m.dim)
        .map(|k| {
            let var: f64 = w.iter().zip(&eps).map(|(wi, e)| wi * (e[k] - mean[k]).powi(2)).sum();
            (var / ess).sqrt()
        })
        .collect();
    Ok((mean, se))
}

/// Outcome of one oracle check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: value.is_finite() && value < tolerance,
            value,
            tolerance,
        }
    }
}

/// Worst relative deviation between the analytic score and central
/// differences of the log-density over random mixtures and points.
pub fn score_fd_error(trials: usize, seed: u64) -> f64 {
    let s = NoiseSchedule::scaled_linear(100).expect("valid schedule");
    let mut rng = named_stream(seed, "score-fd", 0);
    let mut worst = 0f64;
    for _ in 0..trials {
        let k = rng.random_range(1..=4);
        let dim = rng.random_range(1..=3);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let comps = raw
            .iter()
            .map(|&w| Component {
                weight: w / total,
                mean: (0..dim).map(|_| 2.0 * normal_f64(&mut rng)).collect(),
                sigma: rng.random_range(0.3..1.5),
            })
            .collect();
        let m = GaussianMixture::new(comps).expect("valid mixture");
        let t = rng.random_range(1..=100);
        let d = diffused_mixture(&m, t, &s).expect("step in range");
        let z: Vec<f64> = (0..dim).map(|_| 1.5 * normal_f64(&mut rng)).collect();
        let g = exact_score(&m, &z, t, &s).expect("dims match");
        let h = 1e-5;
        for i in 0..dim {
            let mut p = z.clone();
            p[i] += h;
            let fp = d.log_density(&p);
            p[i] -= 2.0 * h;
            let fm = d.log_density(&p);
            let num = (fp - fm) / (2.0 * h);
            worst = worst.max((num - g[i]).abs() / num.abs().max(g[i].abs()).max(1.0));
        }
    }
    worst
}

/// Largest deviation between guided optimal noise of two equal-variance
/// Gaussians and the optimal noise of the Gaussian with the extrapolated
/// mean, using `combine` as the guidance rule.
pub fn cfg_identity_error(combine: fn(f64, f64, f64) -> f64) -> f64 {
    let s = NoiseSchedule::scaled_linear(100).expect("valid schedule");
    let (mu_c, mu_u, sigma) = ([2.0, -1.0], [0.5, 0.25], 0.7);
    let mut worst = 0f64;
    for w in [-1.0, -0.3, 0.0, 1.0, 1.75, 4.0] {
        let mu_g: Vec<f64> = mu_c.iter().zip(&mu_u).map(|(c, u)| (1.0 + w) * c - w * u).collect();
        let gc = GaussianMixture::uniform(vec![mu_c.to_vec()], sigma).expect("valid");
        let gu = GaussianMixture::uniform(vec![mu_u.to_vec()], sigma).expect("valid");
        let gg = GaussianMixture::uniform(vec![mu_g], sigma).expect("valid");
        for t in [1, 10, 50, 100] {
            for z in [[0.0, 0.0], [1.3, -2.2], [-4.0, 3.0]] {
                let ec = optimal_eps(&gc, &z, t, &s).expect("valid");
                let eu = optimal_eps(&gu, &z, t, &s).expect("valid");
                let eg = optimal_eps(&gg, &z, t, &s).expect("valid");
                for k in 0..2 {
                    worst = worst.max((combine(ec[k], eu[k], w) - eg[k]).abs());
                }
            }
        }
    }
    worst
}

/// Sample statistics of the reverse chain driven by the exact denoiser of a
/// single Gaussian.
#[derive(Clone, Debug, Serialize)]
pub struct RecoveryStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub n: usize,
}

pub fn sampler_recovery(
    mean: &[f64],
    sigma: f64,
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<RecoveryStats> {
    let grid = GmmGrid {
        means: vec![vec![mean.to_vec()]],
        sigma,
    };
    let oracle = OracleDenoiser {
        grid,
        schedule: schedule.clone(),
    };
    let cond = ConditionPair::new(
        crate::conditioning::MaskCondition::null(1, 1, 1),
        crate::conditioning::TextCondition::null(1),
    );
    let spec = GuidanceSpec {
        w: 0.0,
        sampler,
        seed,
        batch_size: 256,
    };
    let out = generate(&oracle, &spec, &vec![cond; n], (1, 1, mean.len()), schedule)?;
    let d = mean.len();
    let mut m = vec![0.0; d];
    for img in &out {
        for (a, &v) in m.iter_mut().zip(img.data()) {
            *a += v as f64 / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for img in &out {
        for ((a, &v), mu) in var.iter_mut().zip(img.data()).zip(&m) {
            *a += (v as f64 - mu).powi(2) / (n as f64 - 1.0);
        }
    }
    Ok(RecoveryStats {
        mean: m,
        variance: var,
        n,
    })
}

/// Exact variance of deterministic DDIM output, relative to `sigma^2`, when
/// the data are `N(mu, sigma^2)` and the noise prediction is optimal. Each
/// hop maps the centred state linearly, `u' = k u`, with
/// `k = (sqrt(ab ab') sigma^2 + sqrt((1 - ab)(1 - ab'))) / (ab sigma^2 + 1 - ab)`,
/// and the chain starts from unit variance.
pub fn ddim_variance_ratio(schedule: &NoiseSchedule, steps: usize, sigma: f64) -> Result<f64> {
    let mut seq = make_ddim_subsequence(schedule.num_steps(), steps)?;
    seq.push(0);
    let s2 = sigma * sigma;
    let mut gain = 1.0;
    for pair in seq.windows(2) {
        let (ab, abp) = (schedule.alpha_bar(pair[0])?, schedule.alpha_bar(pair[1])?);
        gain *= ((ab * abp).sqrt() * s2 + ((1.0 - ab) * (1.0 - abp)).sqrt()) / (ab * s2 + 1.0 - ab);
    }
    Ok(gain * gain / s2)
}

/// The full oracle suite run by `oracle-check`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let s = NoiseSchedule::scaled_linear(100)?;

    let std = GaussianMixture::uniform(vec![vec![0.0, 0.0]], 1.0)?;
    let mut worst = 0f64;
    for t in [1, 37, 100] {
        let z = [0.7, -1.9];
        let sc = exact_score(&std, &z, t, &s)?;
        worst = worst.max((sc[0] + z[0]).abs().max((sc[1] + z[1]).abs()));
        let e = optimal_eps(&std, &z, t, &s)?;
        let k = (1.0 - s.alpha_bar(t)?).sqrt();
        worst = worst.max((e[0] - k * z[0]).abs().max((e[1] - k * z[1]).abs()));
    }
    out.push(CheckOutcome::below("standard normal score is -z", worst, 1e-12));

    let sym = GaussianMixture::uniform(vec![vec![-2.0], vec![2.0]], 0.5)?;
    let mid = exact_score(&sym, &[0.0], 20, &s)?[0].abs();
    out.push(CheckOutcome::below("symmetric mixture score vanishes at midpoint", mid, 1e-12));

    out.push(CheckOutcome::below(
        "score matches log-density finite differences",
        score_fd_error(200, seed),
        1e-6,
    ));

    let quad = GaussianMixture::uniform(
        vec![vec![-3.0, -3.0], vec![3.0, -3.0], vec![-3.0, 3.0], vec![3.0, 3.0]],
        0.5,
    )?;
    let mut worst_z = 0f64;
    for (t, z) in [(30, [1.0, 2.0]), (60, [-0.5, 0.3]), (90, [0.2, -0.1])] {
        let exact = optimal_eps(&quad, &z, t, &s)?;
        let (mc, se) = mc_conditional_eps(&quad, &z, t, &s, 200_000, seed)?;
        for k in 0..2 {
            worst_z = worst_z.max((mc[k] - exact[k]).abs() / se[k].max(1e-12));
        }
    }
    out.push(CheckOutcome::below(
        "importance-sampled E[eps | z_t] within 3 standard errors",
        worst_z,
        3.0,
    ));

    out.push(CheckOutcome::below(
        "guided optimal noise equals optimal noise of extrapolated Gaussian",
        cfg_identity_error(cfg_combine::<f64>),
        1e-12,
    ));

    // The ancestral chain with the small posterior variance under-disperses
    // by roughly 10% at T = 100, so it is checked on the 1000-step chain.
    let long = NoiseSchedule::scaled_linear(1000)?;
    let (mu, sigma, n) = ([3.0, -2.0], 0.5, 1000);
    for (label, sampler, sched) in [
        ("ddim", SamplerKind::Ddim { steps: 100, eta: 0.0 }, &s),
        ("ancestral", SamplerKind::Ancestral, &long),
    ] {
        let st = sampler_recovery(&mu, sigma, sched, sampler, n, seed)?;
        let bound = 4.0 * sigma / (n as f64).sqrt();
        let dm = st.mean.iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.push(CheckOutcome::below(&format!("{label} sampler mean within 4 sigma/sqrt(N)"), dm, bound));
        let dv = st
            .variance
            .iter()
            .map(|v| (v / (sigma * sigma) - 1.0).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome::below(&format!("{label} sampler variance within 10%"), dv, 0.1));
    }
    let expected = ddim_variance_ratio(&s, 100, sigma)?;
    out.push(CheckOutcome::below(
        "ddim exact variance contraction within 10%",
        (expected - 1.0).abs(),
        0.1,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{MaskCondition, TextCondition};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(100).unwrap()
    }

    #[test]
    fn diffused_hand_values() {
        let s = NoiseSchedule::from_increments(vec![0.1, 0.2]).unwrap();
        let m = GaussianMixture::uniform(vec![vec![3.0]], 0.5).unwrap();
        let d = diffused_mixture(&m, 2, &s).unwrap();
        let c = &d.components()[0];
        assert!((c.mean[0] - 2.545584412271571).abs() < 1e-12);
        assert!((c.sigma * c.sigma - 0.46).abs() < 1e-12);
        let unit = GaussianMixture::uniform(vec![vec![0.0]], 1.0).unwrap();
        for t in 1..=2 {
            let c = diffused_mixture(&unit, t, &s).unwrap().components()[0].clone();
            assert!((c.sigma - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn terminal_limit_is_standard_normal() {
        let s = NoiseSchedule::scaled_linear(1000).unwrap();
        let m = GaussianMixture::uniform(vec![vec![5.0, -5.0], vec![1.0, 2.0]], 0.3).unwrap();
        let d = diffused_mixture(&m, 1000, &s).unwrap();
        for c in d.components() {
            assert!(c.mean.iter().all(|v| v.abs() < 0.05));
            assert!((c.sigma - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_component_score_formula() {
        let s = sched();
        let m = GaussianMixture::uniform(vec![vec![1.0, -2.0]], 0.4).unwrap();
        let ab = s.alpha_bar(40).unwrap();
        let z = [0.3, 0.9];
        let got = exact_score(&m, &z, 40, &s).unwrap();
        for k in 0..2 {
            let expect = -(z[k] - ab.sqrt() * m.components()[0].mean[k]) / (ab * 0.16 + 1.0 - ab);
            assert!((got[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn suite_passes() {
        for c in run_suite(3).unwrap() {
            assert!(c.passed, "{} = {} (tol {})", c.name, c.value, c.tolerance);
        }
    }

    #[test]
    fn sign_mutation_breaks_cfg_identity() {
        fn flipped(c: f64, u: f64, w: f64) -> f64 {
            (1.0 + w) * c + w * u
        }
        assert!(cfg_identity_error(cfg_combine::<f64>) < 1e-12);
        assert!(cfg_identity_error(flipped) > 1e-3);
    }

    #[test]
    fn conditional_restrictions() {
        let g = GmmGrid::quadrants();
        let nm = MaskCondition::null(1, 1, 2);
        let nt = TextCondition::null(2);
        let right = TextCondition::new(1, 2).unwrap();
        let top = MaskCondition::new(1, 1, 2, vec![1]).unwrap();
        assert_eq!(conditional_mixture(&g, &ConditionPair::new(nm.clone(), nt)).unwrap().components().len(), 4);
        let col = conditional_mixture(&g, &ConditionPair::new(nm, right)).unwrap();
        assert_eq!(col.components().len(), 2);
        assert!(col.components().iter().all(|c| c.mean[0] == 3.0));
        let both = conditional_mixture(&g, &ConditionPair::new(top, right)).unwrap();
        assert_eq!(both.components().len(), 1);
        assert_eq!(both.components()[0].mean, vec![3.0, 3.0]);
        let bad = ConditionPair::new(MaskCondition::null(1, 1, 2), TextCondition::new(2, 3).unwrap());
        assert!(conditional_mixture(&g, &bad).is_err());
    }

    #[test]
    fn optimal_loss_of_standard_normal_prior() {
        // x0 ~ N(0, 1): eps | z is Gaussian with variance ab, so the optimal
        // loss is the schedule mean of ab.
        let s = sched();
        let m = GaussianMixture::uniform(vec![vec![0.0]], 1.0).unwrap();
        let draws = regression_draws(&m, &s, 100_000, 5);
        let (l, se) = optimal_loss(&m, &s, &draws).unwrap();
        let expect = s.alpha_bars().iter().sum::<f64>() / 100.0;
        assert!((l - expect).abs() < 4.0 * se, "{l} vs {expect} (se {se})");
    }

    #[test]
    fn ddim_contraction_matches_simulation() {
        let s = sched();
        let r = ddim_variance_ratio(&s, 100, 0.5).unwrap();
        assert!(r < 1.0 && r > 0.9, "{r}");
        let st = sampler_recovery(&[3.0, -2.0], 0.5, &s, SamplerKind::Ddim { steps: 100, eta: 0.0 }, 20_000, 4).unwrap();
        for v in &st.variance {
            assert!((v / 0.25 - r).abs() < 0.03, "{} vs {r}", v / 0.25);
        }
        let fine = ddim_variance_ratio(&NoiseSchedule::scaled_linear(1000).unwrap(), 1000, 0.5).unwrap();
        assert!((fine - 1.0).abs() < (r - 1.0).abs() / 5.0, "{fine}");
        // A single hop from T straight to 0 keeps only the tiny signal term.
        assert!(ddim_variance_ratio(&s, 1, 0.5).unwrap() < 1e-3);
    }
}
