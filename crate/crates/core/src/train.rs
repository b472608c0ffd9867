//! Joint training over the two unpaired halves.
//!
//! Every example independently comes from the text half with probability
//! `p_split` (keeping its null mask) or from the mask half otherwise (keeping
//! its null text). With probability `p_uncond` the one available condition
//! is then replaced by its null, which trains the fully unconditional mode
//! used by guidance.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionPair;
use crate::dataset::{Record, UnpairedCorpus};
use crate::denoiser::{init_params, Checkpoint, DenoiserConfig, DenoiserParams, TrainingExample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{named_stream, normal_vec, StreamRng};
use crate::schedule::{forward_diffuse, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Probability of drawing an example from the text half.
    pub p_split: f64,
    /// Probability of dropping the available condition.
    pub p_uncond: f64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimiser steps per epoch; 0 means one pass worth of examples,
    /// `ceil(|train| / batch_size)`.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Size of the fixed validation batch scored after every epoch (0 = off).
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_split: 0.5,
            p_uncond: 0.1,
            learning_rate: 3e-4,
            warmup_steps: 100,
            batch_size: 64,
            epochs: 30,
            steps_per_epoch: 0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_size: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.p_split) {
            return bad(format!("p_split must lie in [0, 1], got {}", self.p_split));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyper-parameters".into());
        }
        Ok(())
    }

    /// `lr * min(1, step / warmup)` for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    T2I,
    M2I,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::T2I => "T2I",
            Source::M2I => "M2I",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Draw<'a> {
    pub image: &'a Image,
    pub cond: ConditionPair,
    pub source: Source,
    pub dropped: bool,
}

/// One draw of the joint training rule.
pub fn draw_training_example<'a, R: Rng + ?Sized>(
    d_t2i: &'a [Record],
    d_m2i: &'a [Record],
    p_split: f64,
    p_uncond: f64,
    rng: &mut R,
) -> Result<Draw<'a>> {
    if d_t2i.is_empty() || d_m2i.is_empty() {
        return Err(Error::InvalidArgument("both training halves must be non-empty".into()));
    }
    let u: f64 = rng.random();
    let (half, source) = if u < p_split {
        (d_t2i, Source::T2I)
    } else {
        (d_m2i, Source::M2I)
    };
    let rec = &half[rng.random_range(0..half.len())];
    let dropped = rng.random::<f64>() < p_uncond;
    let cond = if dropped {
        rec.cond.unconditional()
    } else {
        rec.cond.clone()
    };
    Ok(Draw {
        image: &rec.image,
        cond,
        source,
        dropped,
    })
}

/// A full regression example: draw, uniform step, Gaussian noise, diffuse.
pub fn make_example(
    corpus: &UnpairedCorpus,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<(TrainingExample, Source, bool)> {
    let d = draw_training_example(&corpus.t2i, &corpus.m2i, cfg.p_split, cfg.p_uncond, rng)?;
    let t = rng.random_range(1..=schedule.num_steps());
    let (h, w, c) = d.image.shape();
    let eps = Image::from_vec(h, w, c, normal_vec(rng, h * w * c))?;
    let z_t = forward_diffuse(d.image, t, &eps, schedule)?;
    Ok((
        TrainingExample {
            z_t,
            t,
            cond: d.cond,
            eps,
        },
        d.source,
        d.dropped,
    ))
}

/// Fixed batch drawn with the training rule from `corpus` (typically the
/// held-out split).
pub fn validation_batch(
    corpus: &UnpairedCorpus,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let mut rng = named_stream(seed, "validation", 0);
    (0..n)
        .map(|_| make_example(corpus, cfg, schedule, &mut rng).map(|e| e.0))
        .collect()
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let upd = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            params[i] = (params[i] as f64 - upd) as f32;
        }
    }
}

/// One optimiser step; returns the batch loss.
pub fn train_step(
    params: &mut DenoiserParams<f32>,
    opt: &mut Adam,
    batch: &[TrainingExample],
    lr: f64,
) -> Result<f64> {
    let per = step_with_losses(params, opt, batch, lr)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn step_with_losses(
    params: &mut DenoiserParams<f32>,
    opt: &mut Adam,
    batch: &[TrainingExample],
    lr: f64,
) -> Result<Vec<f64>> {
    let (per, grad) = params.example_losses_and_grad(batch)?;
    opt.update(params.values_mut(), &grad, lr);
    Ok(per)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub source: Source,
    pub loss: f64,
    pub dropped: bool,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_loss_t2i: f64,
    pub mean_loss_m2i: f64,
    pub validation_loss: Option<f64>,
}

/// Per-example records plus exponential running means of the two losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub epochs: Vec<EpochSummary>,
    pub running_t2i: Option<f64>,
    pub running_m2i: Option<f64>,
}

const RUNNING_DECAY: f64 = 0.99;

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        let slot = match r.source {
            Source::T2I => &mut self.running_t2i,
            Source::M2I => &mut self.running_m2i,
        };
        *slot = Some(match *slot {
            None => r.loss,
            Some(prev) => RUNNING_DECAY * prev + (1.0 - RUNNING_DECAY) * r.loss,
        });
        self.records.push(r);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,source,loss,dropped,lr\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.8e},{},{:.8e}\n", r.step, r.source, r.loss, r.dropped, r.lr));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::file(path, e.to_string()))
    }
}

/// Runs the epoch budget from a fresh initialisation. `on_epoch` receives
/// each epoch's summary and checkpoint.
pub fn train(
    model: &DenoiserConfig,
    cfg: &TrainConfig,
    corpus: &UnpairedCorpus,
    schedule: &NoiseSchedule,
    validation: Option<&[TrainingExample]>,
    on_epoch: &mut dyn FnMut(&EpochSummary, &Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    corpus.validate()?;
    if model.num_steps != schedule.num_steps() {
        return Err(Error::InvalidArgument(format!(
            "model expects {} steps but the schedule has {}",
            model.num_steps,
            schedule.num_steps()
        )));
    }
    let mut params = init_params::<f32>(model, cfg.seed)?;
    let mut opt = Adam::new(params.num_params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        corpus.len().div_ceil(cfg.batch_size)
    };
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut ckpt = Checkpoint {
        params: params.clone(),
        step,
        seed: cfg.seed,
        extra: serde_json::Value::Null,
    };
    for epoch in 0..cfg.epochs {
        let first_record = log.records.len();
        for _ in 0..steps_per_epoch {
            step += 1;
            let mut rng = named_stream(cfg.seed, "train-step", step);
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut tags = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (ex, source, dropped) = make_example(corpus, cfg, schedule, &mut rng)?;
                batch.push(ex);
                tags.push((source, dropped));
            }
            let lr = cfg.lr_at(step);
            let per = step_with_losses(&mut params, &mut opt, &batch, lr)?;
            for ((source, dropped), loss) in tags.into_iter().zip(per) {
                log.push(LogRecord {
                    step,
                    source,
                    loss,
                    dropped,
                    lr,
                });
            }
        }
        let recs = &log.records[first_record..];
        let mean_of = |f: &dyn Fn(&LogRecord) -> bool| {
            let v: Vec<f64> = recs.iter().filter(|r| f(r)).map(|r| r.loss).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let validation_loss = match validation {
            Some(v) if !v.is_empty() => {
                let per = params.example_losses(v)?;
                Some(per.iter().sum::<f64>() / per.len() as f64)
            }
            _ => None,
        };
        let summary = EpochSummary {
            epoch,
            steps: step,
            mean_loss: mean_of(&|_| true),
            mean_loss_t2i: mean_of(&|r| r.source == Source::T2I),
            mean_loss_m2i: mean_of(&|r| r.source == Source::M2I),
            validation_loss,
        };
        ckpt = Checkpoint {
            params: params.clone(),
            step,
            seed: cfg.seed,
            extra: serde_json::Value::Null,
        };
        on_epoch(&summary, &ckpt)?;
        log.epochs.push(summary);
    }
    Ok((ckpt, log))
}
