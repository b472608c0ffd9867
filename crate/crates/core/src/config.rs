//! Experiment configuration: one JSON document with a section per module.
//! Unknown keys are rejected at every level. Dotted keys such as
//! `train.p_split` override single entries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{GmmGrid, ToyWorldSpec};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::sample::GuidanceSpec;
use crate::schedule::NoiseSchedule;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Toy,
    Gmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub kind: WorldKind,
    pub toy: ToyWorldSpec,
    pub gmm: GmmGrid,
    pub n_t2i: usize,
    pub n_m2i: usize,
    /// Fraction of each half kept for training.
    pub split_ratio: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            kind: WorldKind::Toy,
            toy: ToyWorldSpec::default(),
            gmm: GmmGrid::quadrants(),
            n_t2i: 2000,
            n_m2i: 2000,
            split_ratio: 0.8,
        }
    }
}

impl WorldConfig {
    /// `(height, width, channels, mask classes, vocabulary)` of the corpus.
    pub fn geometry(&self) -> (usize, usize, usize, usize, usize) {
        match self.kind {
            WorldKind::Toy => (
                self.toy.height,
                self.toy.width,
                3,
                self.toy.num_classes,
                self.toy.vocab() as usize,
            ),
            WorldKind::Gmm => (1, 1, self.gmm.dim(), self.gmm.rows(), self.gmm.cols()),
        }
    }
}

/// Linear increments from `a_start` to `a_end`; when either is absent the
/// scaled-linear defaults for `num_steps` apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub a_start: Option<f64>,
    pub a_end: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            a_start: None,
            a_end: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match (self.a_start, self.a_end) {
            (Some(a), Some(b)) => NoiseSchedule::linear(self.num_steps, a, b),
            (None, None) => NoiseSchedule::scaled_linear(self.num_steps),
            _ => Err(Error::InvalidArgument(
                "schedule.a_start and schedule.a_end must be given together".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out conditions sampled per mode.
    pub num_samples: usize,
    /// Noiseless renders averaged into each text prototype.
    pub prototype_renders: usize,
    /// Segmenter area filter in pixels.
    pub min_area: usize,
    pub psplit_values: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_samples: 100,
            prototype_renders: 32,
            min_area: 2,
            psplit_values: vec![0.2, 0.5, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: GuidanceSpec,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    /// Seeds corpus generation, the train/test split and prototype renders.
    /// Training and sampling carry their own seeds.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sample: GuidanceSpec::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_json(&text).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Applies `section.key=value` overrides. Values parse as JSON when they
    /// can and as plain strings otherwise; the key must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[(S, S)]) -> Result<Self> {
        let mut doc = self.to_value();
        for (key, raw) in overrides {
            let (key, raw) = (key.as_ref(), raw.as_ref());
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key:?}")))?;
            }
            *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("config override: {e}")))
    }

    /// Checks every section and their agreement on image geometry and step
    /// count.
    pub fn validate(&self) -> Result<()> {
        match self.world.kind {
            WorldKind::Toy => self.world.toy.validate()?,
            WorldKind::Gmm => self.world.gmm.validate()?,
        }
        if self.world.n_t2i == 0 || self.world.n_m2i == 0 {
            return Err(Error::Validation("world.n_t2i and world.n_m2i must be positive".into()));
        }
        if !(self.world.split_ratio > 0.0 && self.world.split_ratio < 1.0) {
            return Err(Error::Validation("world.split_ratio must lie in (0, 1)".into()));
        }
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.sample.validate(self.schedule.num_steps)?;
        let (h, w, c, k, v) = self.world.geometry();
        let d = &self.denoiser;
        let got = (d.height, d.width, d.in_channels, d.num_classes, d.vocab);
        if got != (h, w, c, k, v) {
            return Err(Error::Validation(format!(
                "denoiser geometry (height, width, in_channels, num_classes, vocab) = {got:?} \
                 does not match the world {:?}",
                (h, w, c, k, v)
            )));
        }
        if d.num_steps != self.schedule.num_steps {
            return Err(Error::Validation(format!(
                "denoiser.num_steps = {} but schedule.num_steps = {}",
                d.num_steps, self.schedule.num_steps
            )));
        }
        if self.eval.num_samples == 0 || self.eval.prototype_renders == 0 {
            return Err(Error::Validation("eval sample counts must be positive".into()));
        }
        if self.eval.psplit_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("eval.psplit_values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Copy with the denoiser geometry taken from the world and the step
    /// count from the schedule.
    pub fn aligned(&self) -> Self {
        let mut out = self.clone();
        let (h, w, c, k, v) = self.world.geometry();
        out.denoiser.height = h;
        out.denoiser.width = w;
        out.denoiser.in_channels = c;
        out.denoiser.num_classes = k;
        out.denoiser.vocab = v;
        out.denoiser.num_steps = self.schedule.num_steps;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"world": {"toy": {"colour": 1}}}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"seed": 7, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs), (7, 2));
    }

    #[test]
    fn dotted_overrides() {
        let pairs = [("train.p_split", "0.2"), ("world.kind", "gmm"), ("sample.sampler", r#"{"kind":"ancestral"}"#)];
        let cfg = ExperimentConfig::default().with_overrides(&pairs).unwrap();
        assert_eq!(cfg.train.p_split, 0.2);
        assert_eq!(cfg.world.kind, WorldKind::Gmm);
        assert_eq!(cfg.sample.sampler, crate::sample::SamplerKind::Ancestral);
        assert!(ExperimentConfig::default().with_overrides(&[("train.nope", "1")]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&[("train.epochs", "many")]).is_err());
    }

    #[test]
    fn geometry_mismatch_detected_and_aligned() {
        let cfg = ExperimentConfig::default().with_overrides(&[("world.kind", "gmm")]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        let fixed = cfg.aligned();
        fixed.validate().unwrap();
        assert_eq!((fixed.denoiser.height, fixed.denoiser.in_channels), (1, 2));
        let bad = ExperimentConfig::default().with_overrides(&[("schedule.num_steps", "50")]).unwrap();
        assert!(bad.validate().is_err());
        assert!(bad.aligned().validate().is_ok());
    }

    #[test]
    fn schedule_endpoints_together() {
        let s = ScheduleConfig {
            a_start: Some(1e-4),
            ..Default::default()
        };
        assert!(s.build().is_err());
        let s = ScheduleConfig {
            num_steps: 10,
            a_start: Some(1e-3),
            a_end: Some(0.1),
        };
        assert_eq!(s.build().unwrap().num_steps(), 10);
    }
}
