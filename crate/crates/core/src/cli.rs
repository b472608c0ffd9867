//! Commands behind the `dualdiff` binary. Every command starts from an
//! [`ExperimentConfig`] (file plus `--section.key` overrides) and embeds that
//! config and the checksums of its inputs in whatever it writes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conditioning::{random_pairing, ConditionPair, MaskCondition, TextCondition};
use crate::config::{ExperimentConfig, WorldKind};
use crate::dataset::{
    gen_gmm_corpus, load_corpus, load_ground_truth, make_unpaired, manifest_checksum, save_corpus_with,
    sha256_hex, split, GroundTruth, UnpairedCorpus,
};
use crate::denoiser::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{write_ppm_grid, Image};
use crate::metrics::{feature_matrix, fs1, fs2, frechet, kid, silver_masks, AlignmentModel, SegmenterSpec};
use crate::oracle::{run_suite, CheckOutcome};
use crate::sample::{generate, GuidanceSpec, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::train::{train, validation_batch, EpochSummary, TrainLog};

pub const SAMPLES_FORMAT: &str = "dualdiff-samples/1";
pub const REPORT_FORMAT: &str = "dualdiff-eval/1";

#[derive(Debug, Parser)]
#[command(name = "dualdiff", version, about = "Dual-condition diffusion on unpaired text/mask corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment config. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--section.key value` pairs, pulled out of the argument list before
    /// clap sees it (see [`Cli::parse_from_args`]).
    #[arg(skip)]
    pub overrides: Vec<(String, String)>,
}

impl Cli {
    /// Parses `args` (program name first). Flags whose name contains a dot
    /// are config overrides and may appear anywhere after the subcommand.
    pub fn parse_from_args<I, S>(args: I) -> std::result::Result<(Self, Vec<(String, String)>), clap::Error>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let (rest, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
        let mut cli = Cli::try_parse_from(rest)?;
        let over = overrides.clone();
        match &mut cli.command {
            Command::GenData { cfg, .. }
            | Command::Train { cfg, .. }
            | Command::Sample { cfg, .. }
            | Command::Eval { cfg, .. }
            | Command::AblatePsplit { cfg, .. }
            | Command::OracleCheck { cfg, .. } => cfg.overrides = over,
        }
        Ok((cli, overrides))
    }
}

/// Separates `--a.b value` / `--a.b=value` pairs from the other arguments.
/// A dotted flag at the very end without a value is left for clap to reject.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut over = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
            .map(str::to_string);
        match dotted {
            Some(flag) => match flag.split_once('=') {
                Some((k, v)) => over.push((k.to_string(), v.to_string())),
                None => match it.next() {
                    Some(v) => over.push((flag, v)),
                    None => rest.push(arg),
                },
            },
            None => rest.push(arg),
        }
    }
    (rest, over)
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus and write its train and test splits.
    GenData {
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on `<data>/train`, writing checkpoints and the loss log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample held-out conditions in one mode; writes a PPM grid, raw
    /// samples and a JSON sidecar.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: SampleMode,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of samples (default: eval.num_samples).
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score every sampling mode on held-out conditions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path (default: `<paths.out_dir>/eval.json`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrain and evaluate once per value of eval.psplit_values.
    AblatePsplit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the Gaussian-mixture oracle suite.
    OracleCheck {
        /// Optional JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Text,
    Mask,
    Both,
    Uncond,
    Silver,
    RandomPair,
}

impl SampleMode {
    pub const ALL: [SampleMode; 6] = [
        SampleMode::Text,
        SampleMode::Mask,
        SampleMode::Both,
        SampleMode::Uncond,
        SampleMode::Silver,
        SampleMode::RandomPair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Text => "text",
            SampleMode::Mask => "mask",
            SampleMode::Both => "both",
            SampleMode::Uncond => "uncond",
            SampleMode::Silver => "silver",
            SampleMode::RandomPair => "random-pair",
        }
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reads the config file (or defaults), applies overrides, derives the
/// denoiser geometry from the world and validates.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&args.overrides)?.aligned();
    cfg.validate()?;
    Ok(cfg)
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<(UnpairedCorpus, GroundTruth)> {
    let w = &cfg.world;
    match w.kind {
        WorldKind::Toy => make_unpaired(&w.toy, w.n_t2i, w.n_m2i, cfg.seed),
        WorldKind::Gmm => gen_gmm_corpus(&w.gmm, w.n_t2i, w.n_m2i, cfg.seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenDataSummary {
    pub train_t2i: usize,
    pub train_m2i: usize,
    pub test_t2i: usize,
    pub test_m2i: usize,
    pub train_manifest_sha256: String,
    pub test_manifest_sha256: String,
}

/// Writes `<out>/train` (no ground truth) and `<out>/test` (with the
/// withheld modality of each scene for evaluation).
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataSummary> {
    let (corpus, truth) = build_corpus(cfg)?;
    let (tr, te) = split(&corpus, cfg.world.split_ratio, cfg.seed)?;
    let prov = |part: &str| json!({ "config": cfg.to_value(), "split": part });
    let (dtr, dte) = (out.join("train"), out.join("test"));
    save_corpus_with(&tr, None, &dtr, prov("train"))?;
    save_corpus_with(&te, Some(&truth), &dte, prov("test"))?;
    Ok(GenDataSummary {
        train_t2i: tr.t2i.len(),
        train_m2i: tr.m2i.len(),
        test_t2i: te.t2i.len(),
        test_m2i: te.m2i.len(),
        train_manifest_sha256: manifest_checksum(&dtr)?,
        test_manifest_sha256: manifest_checksum(&dte)?,
    })
}

fn check_corpus_matches(cfg: &ExperimentConfig, c: &UnpairedCorpus) -> Result<()> {
    let d = &cfg.denoiser;
    let want = (d.height, d.width, d.in_channels);
    if c.shape != want || c.num_classes != d.num_classes || c.vocab as usize != d.vocab {
        return Err(Error::Validation(format!(
            "corpus geometry {:?} with {} classes and vocabulary {} does not match the config",
            c.shape, c.num_classes, c.vocab
        )));
    }
    Ok(())
}

/// Trains on `<data>/train`. Writes `last.ckpt` after every epoch, then
/// `model.ckpt`, `train_log.csv` and `epochs.json`.
pub fn run_train(cfg: &ExperimentConfig, data: &Path, out: &Path, quiet: bool) -> Result<(Checkpoint, TrainLog)> {
    let train_dir = data.join("train");
    let corpus = load_corpus(&train_dir)?;
    check_corpus_matches(cfg, &corpus)?;
    let schedule = cfg.schedule.build()?;
    let validation = if cfg.train.validation_size > 0 {
        let test = load_corpus(&data.join("test"))?;
        Some(validation_batch(&test, &cfg.train, &schedule, cfg.train.validation_size, cfg.train.seed)?)
    } else {
        None
    };
    fs::create_dir_all(out)?;
    let extra = json!({
        "config": cfg.to_value(),
        "data_manifest_sha256": manifest_checksum(&train_dir)?,
    });
    let start = Instant::now();
    let last = out.join("last.ckpt");
    let (mut ck, log) = train(
        &cfg.denoiser,
        &cfg.train,
        &corpus,
        &schedule,
        validation.as_deref(),
        &mut |e: &EpochSummary, ck: &Checkpoint| {
            if !quiet {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  t2i {:.5}  m2i {:.5}{}  [{:.1}s]",
                    e.epoch,
                    e.mean_loss,
                    e.mean_loss_t2i,
                    e.mean_loss_m2i,
                    e.validation_loss.map(|v| format!("  val {v:.5}")).unwrap_or_default(),
                    start.elapsed().as_secs_f64()
                );
            }
            let mut ck = ck.clone();
            ck.extra = extra.clone();
            ck.save(&last)
        },
    )?;
    ck.extra = extra;
    ck.save(&out.join("model.ckpt"))?;
    log.write_csv(&out.join("train_log.csv"))?;
    fs::write(out.join("epochs.json"), serde_json::to_vec_pretty(&log.epochs)?)?;
    Ok((ck, log))
}

/// Held-out material for conditioning: mask-half scenes with their withheld
/// text, and text-half scenes.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub m2i: Vec<(Image, ConditionPair)>,
    pub t2i: Vec<(Image, TextCondition)>,
    pub null: ConditionPair,
}

pub fn held_out(test: &UnpairedCorpus, truth: &GroundTruth) -> Result<HeldOut> {
    let m2i = test
        .m2i
        .iter()
        .map(|r| {
            let full = truth
                .get(r.id)
                .ok_or_else(|| Error::Validation(format!("no ground truth for held-out scene {}", r.id)))?;
            Ok((r.image.clone(), full.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let t2i = test.t2i.iter().map(|r| (r.image.clone(), r.cond.text)).collect();
    Ok(HeldOut {
        m2i,
        t2i,
        null: ConditionPair::new(test.null_mask(), test.null_text()),
    })
}

/// Conditions for one mode, with what each metric needs alongside.
#[derive(Clone, Debug)]
pub struct ModeBatch {
    pub mode: SampleMode,
    pub conds: Vec<ConditionPair>,
    /// The real image each condition came from.
    pub paired_real: Vec<Image>,
    /// Mask of the evaluation scene FS1 is scored against. Equal to the
    /// conditioning mask except under random pairing, where it is the
    /// silver mask of the scene the text came from.
    pub reference_masks: Option<Vec<MaskCondition>>,
}

impl ModeBatch {
    pub fn masks(&self) -> Option<Vec<MaskCondition>> {
        let m: Vec<MaskCondition> = self.conds.iter().map(|c| c.mask.clone()).collect();
        (!m.iter().any(|m| m.is_null())).then_some(m)
    }

    pub fn texts(&self) -> Option<Vec<TextCondition>> {
        let t: Vec<TextCondition> = self.conds.iter().map(|c| c.text).collect();
        (!t.iter().any(|t| t.is_null())).then_some(t)
    }
}

/// Builds up to `n` conditions for `mode`. Silver masks come from the
/// segmenter run on text-half images; random pairing gives each of those
/// texts a mask drawn from the mask half.
pub fn mode_batch(mode: SampleMode, held: &HeldOut, seg: Option<&SegmenterSpec>, n: usize, seed: u64) -> Result<ModeBatch> {
    let need = |len: usize, what: &str| -> Result<usize> {
        if len == 0 {
            Err(Error::Validation(format!("no held-out {what} scenes for mode {mode}")))
        } else {
            Ok(n.min(len))
        }
    };
    let (conds, paired_real, reference_masks) = match mode {
        SampleMode::Text | SampleMode::Silver | SampleMode::RandomPair => {
            let k = need(held.t2i.len(), "text")?;
            let src = &held.t2i[..k];
            let images: Vec<Image> = src.iter().map(|(i, _)| i.clone()).collect();
            let texts: Vec<TextCondition> = src.iter().map(|(_, t)| *t).collect();
            if mode == SampleMode::Text {
                let conds = texts.iter().map(|&t| ConditionPair::new(held.null.mask.clone(), t)).collect();
                (conds, images, None)
            } else {
                let seg = seg.ok_or_else(|| Error::Validation("silver masks need the toy segmenter".into()))?;
                let silver = silver_masks(&images, seg)?;
                let conds = if mode == SampleMode::Silver {
                    silver.iter().zip(&texts).map(|(m, &t)| ConditionPair::new(m.clone(), t)).collect()
                } else {
                    need(held.m2i.len(), "mask")?;
                    let masks: Vec<MaskCondition> = held.m2i.iter().map(|(_, c)| c.mask.clone()).collect();
                    random_pairing(&masks, &texts, seed)?
                };
                (conds, images, Some(silver))
            }
        }
        SampleMode::Mask | SampleMode::Both => {
            let k = need(held.m2i.len(), "mask")?;
            let src = &held.m2i[..k];
            let conds = src
                .iter()
                .map(|(_, c)| if mode == SampleMode::Mask { c.without_text() } else { c.clone() })
                .collect();
            let masks = src.iter().map(|(_, c)| c.mask.clone()).collect();
            (conds, src.iter().map(|(i, _)| i.clone()).collect(), Some(masks))
        }
        SampleMode::Uncond => {
            let pool: Vec<&Image> = held.m2i.iter().map(|(i, _)| i).chain(held.t2i.iter().map(|(i, _)| i)).collect();
            let k = need(pool.len(), "")?;
            (vec![held.null.clone(); k], pool[..k].iter().map(|&i| i.clone()).collect(), None)
        }
    };
    Ok(ModeBatch {
        mode,
        conds,
        paired_real,
        reference_masks,
    })
}

/// Loads a checkpoint whose image geometry and step count agree with the
/// config. Width settings come from the checkpoint itself.
pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let (a, b) = (ck.params.config(), &cfg.denoiser);
    let key = |d: &crate::denoiser::DenoiserConfig| (d.height, d.width, d.in_channels, d.num_classes, d.vocab, d.num_steps);
    if key(a) != key(b) {
        return Err(Error::file(
            path,
            format!("checkpoint geometry {:?} does not match the config {:?}", key(a), key(b)),
        ));
    }
    Ok(ck)
}

fn load_test(cfg: &ExperimentConfig, data: &Path) -> Result<(HeldOut, String)> {
    let dir = data.join("test");
    let test = load_corpus(&dir)?;
    check_corpus_matches(cfg, &test)?;
    let truth = load_ground_truth(&dir)?;
    Ok((held_out(&test, &truth)?, manifest_checksum(&dir)?))
}

fn segmenter(cfg: &ExperimentConfig) -> Option<SegmenterSpec> {
    (cfg.world.kind == WorldKind::Toy).then(|| SegmenterSpec {
        min_area: cfg.eval.min_area,
        ..SegmenterSpec::from_world(&cfg.world.toy)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCondition {
    pub text: Option<u32>,
    pub mask_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub format: String,
    pub mode: SampleMode,
    pub count: usize,
    pub shape: [usize; 3],
    pub guidance: GuidanceSpec,
    pub checkpoint_sha256: String,
    pub data_manifest_sha256: String,
    pub samples_sha256: String,
    pub conditions: Vec<SampleCondition>,
    pub config: Value,
}

/// Writes `samples_<mode>.{f32,json}` and, for 1- or 3-channel images,
/// `samples_<mode>.ppm`.
pub fn run_sample(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    mode: SampleMode,
    data: &Path,
    out: &Path,
    count: usize,
) -> Result<SampleSidecar> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let (held, data_sha) = load_test(cfg, data)?;
    let batch = mode_batch(mode, &held, segmenter(cfg).as_ref(), count, cfg.sample.seed)?;
    let schedule = cfg.schedule.build()?;
    let shape = (cfg.denoiser.height, cfg.denoiser.width, cfg.denoiser.in_channels);
    let images = generate(&ck.params, &cfg.sample, &batch.conds, shape, &schedule)?;
    fs::create_dir_all(out)?;
    let raw: Vec<u8> = images.iter().flat_map(|i| i.to_le_bytes()).collect();
    let stem = format!("samples_{}", mode.name());
    fs::write(out.join(format!("{stem}.f32")), &raw)?;
    if matches!(shape.2, 1 | 3) {
        let cols = (images.len() as f64).sqrt().ceil() as usize;
        write_ppm_grid(&out.join(format!("{stem}.ppm")), &images, cols.max(1))?;
    }
    let sidecar = SampleSidecar {
        format: SAMPLES_FORMAT.into(),
        mode,
        count: images.len(),
        shape: [shape.0, shape.1, shape.2],
        guidance: cfg.sample.clone(),
        checkpoint_sha256: ck.checksum(),
        data_manifest_sha256: data_sha,
        samples_sha256: sha256_hex(&raw),
        conditions: batch
            .conds
            .iter()
            .map(|c| SampleCondition {
                text: (!c.text.is_null()).then(|| c.text.token()),
                mask_sha256: (!c.mask.is_null()).then(|| sha256_hex(c.mask.labels())),
            })
            .collect(),
        config: cfg.to_value(),
    };
    fs::write(out.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: SampleMode,
    pub count: usize,
    #[serde(rename = "toy_fd")]
    pub toy_fd: f64,
    #[serde(rename = "toy_kid")]
    pub toy_kid: f64,
    /// Present when the mode conditions on masks. Scored against the
    /// evaluation scene's mask.
    pub fs1: Option<f64>,
    /// FS1 against the conditioning mask itself.
    pub fs1_conditioning: Option<f64>,
    pub fs2: Option<f64>,
    /// Present when the mode conditions on text.
    pub alignment: Option<f64>,
    pub alignment_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    /// FS1 of the real mask-half images against their own masks.
    pub fs1_real: f64,
    /// Alignment accuracy of the real text-half images.
    pub alignment_accuracy_real: f64,
    /// toy-FD and toy-KID between the two real held-out halves.
    pub toy_fd_real: f64,
    pub toy_kid_real: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub checkpoint_sha256: String,
    pub data_manifest_sha256: String,
    pub guidance: GuidanceSpec,
    pub reference: ReferenceReport,
    pub modes: Vec<ModeReport>,
    pub config: Value,
}

/// Everything needed to score samples against held-out data.
pub struct Evaluator {
    pub seg: SegmenterSpec,
    pub align: AlignmentModel,
    pub real_features: Vec<Vec<f64>>,
}

impl Evaluator {
    pub fn new(cfg: &ExperimentConfig, held: &HeldOut) -> Result<Self> {
        let seg = segmenter(cfg).ok_or_else(|| Error::Validation("evaluation needs the toy world".into()))?;
        let align = AlignmentModel::fit(&cfg.world.toy, &seg, cfg.eval.prototype_renders, cfg.seed)?;
        let real: Vec<Image> = held.m2i.iter().map(|(i, _)| i.clone()).chain(held.t2i.iter().map(|(i, _)| i.clone())).collect();
        Ok(Self {
            real_features: feature_matrix(&real, &seg)?,
            seg,
            align,
        })
    }

    pub fn reference(&self, held: &HeldOut) -> Result<ReferenceReport> {
        let mi: Vec<Image> = held.m2i.iter().map(|(i, _)| i.clone()).collect();
        let mm: Vec<MaskCondition> = held.m2i.iter().map(|(_, c)| c.mask.clone()).collect();
        let ti: Vec<Image> = held.t2i.iter().map(|(i, _)| i.clone()).collect();
        let tt: Vec<TextCondition> = held.t2i.iter().map(|(_, t)| *t).collect();
        let (fm, ft) = (feature_matrix(&mi, &self.seg)?, feature_matrix(&ti, &self.seg)?);
        Ok(ReferenceReport {
            fs1_real: fs1(&mi, &mm, &self.seg)?,
            alignment_accuracy_real: self.align.evaluate(&ti, &tt)?.1,
            toy_fd_real: frechet(&fm, &ft)?,
            toy_kid_real: kid(&fm, &ft)?,
        })
    }

    pub fn score(&self, batch: &ModeBatch, images: &[Image]) -> Result<ModeReport> {
        let feats = feature_matrix(images, &self.seg)?;
        let (fs1v, fs1c, fs2v) = match (&batch.reference_masks, batch.masks()) {
            (Some(r), Some(m)) => (
                Some(fs1(images, r, &self.seg)?),
                Some(fs1(images, &m, &self.seg)?),
                Some(fs2(images, &batch.paired_real, &self.seg)?),
            ),
            _ => (None, None, None),
        };
        let (al, acc) = match batch.texts() {
            Some(t) => {
                let (s, a) = self.align.evaluate(images, &t)?;
                (Some(s), Some(a))
            }
            None => (None, None),
        };
        Ok(ModeReport {
            mode: batch.mode,
            count: images.len(),
            toy_fd: frechet(&feats, &self.real_features)?,
            toy_kid: kid(&feats, &self.real_features)?,
            fs1: fs1v,
            fs1_conditioning: fs1c,
            fs2: fs2v,
            alignment: al,
            alignment_accuracy: acc,
        })
    }
}

/// Samples and scores each mode. `pair_seed` drives random pairing.
pub fn evaluate_modes<P: NoisePredictor + ?Sized>(
    model: &P,
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    held: &HeldOut,
    ev: &Evaluator,
    modes: &[SampleMode],
    pair_seed: u64,
) -> Result<Vec<ModeReport>> {
    let shape = (cfg.denoiser.height, cfg.denoiser.width, cfg.denoiser.in_channels);
    modes
        .iter()
        .map(|&mode| {
            let batch = mode_batch(mode, held, Some(&ev.seg), cfg.eval.num_samples, pair_seed)?;
            let images = generate(model, guidance, &batch.conds, shape, schedule)?;
            ev.score(&batch, &images)
        })
        .collect()
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let (held, data_sha) = load_test(cfg, data)?;
    let ev = Evaluator::new(cfg, &held)?;
    let schedule = cfg.schedule.build()?;
    let modes = evaluate_modes(&ck.params, cfg, &schedule, &cfg.sample, &held, &ev, &SampleMode::ALL, cfg.sample.seed)?;
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        checkpoint_sha256: ck.checksum(),
        data_manifest_sha256: data_sha,
        guidance: cfg.sample.clone(),
        reference: ev.reference(&held)?,
        modes,
        config: cfg.to_value(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub p_split: f64,
    pub seed: u64,
    pub steps: u64,
    pub final_loss: f64,
    pub fs1_mask: f64,
    pub fs1_both: f64,
    pub alignment_accuracy_text: f64,
    pub alignment_accuracy_both: f64,
    pub toy_fd_both: f64,
    pub toy_kid_both: f64,
}

pub const ABLATION_HEADER: &str = "p_split,seed,steps,final_loss,fs1_mask,fs1_both,alignment_accuracy_text,alignment_accuracy_both,toy_fd_both,toy_kid_both";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.p_split,
            self.seed,
            self.steps,
            self.final_loss,
            self.fs1_mask,
            self.fs1_both,
            self.alignment_accuracy_text,
            self.alignment_accuracy_both,
            self.toy_fd_both,
            self.toy_kid_both
        )
    }
}

/// One training run and evaluation per p_split value; writes
/// `ablate_psplit.csv`. Wall-clock times go to stderr only.
pub fn ablate_psplit(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let (held, _) = load_test(cfg, data)?;
    let ev = Evaluator::new(cfg, &held)?;
    let schedule = cfg.schedule.build()?;
    let mut rows = Vec::new();
    for &p in &cfg.eval.psplit_values {
        let mut c = cfg.clone();
        c.train.p_split = p;
        let start = Instant::now();
        let (ck, log) = run_train(&c, data, &out.join(format!("p_split_{p}")), true)?;
        eprintln!("p_split {p}: trained in {:.1}s", start.elapsed().as_secs_f64());
        let reps = evaluate_modes(
            &ck.params,
            &c,
            &schedule,
            &c.sample,
            &held,
            &ev,
            &[SampleMode::Mask, SampleMode::Text, SampleMode::Both],
            c.sample.seed,
        )?;
        let (m, t, b) = (&reps[0], &reps[1], &reps[2]);
        rows.push(AblationRow {
            p_split: p,
            seed: c.train.seed,
            steps: ck.step,
            final_loss: log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
            fs1_mask: m.fs1.unwrap_or(f64::NAN),
            fs1_both: b.fs1.unwrap_or(f64::NAN),
            alignment_accuracy_text: t.alignment_accuracy.unwrap_or(f64::NAN),
            alignment_accuracy_both: b.alignment_accuracy.unwrap_or(f64::NAN),
            toy_fd_both: b.toy_fd,
            toy_kid_both: b.toy_kid,
        });
        eprintln!("p_split {p}: done after {:.1}s", start.elapsed().as_secs_f64());
    }
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("ablate_psplit.csv"), csv)?;
    Ok(rows)
}

pub fn oracle_check(cfg: &ExperimentConfig) -> Result<Vec<CheckOutcome>> {
    run_suite(cfg.seed)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { out, cfg } => {
            let cfg = resolve_config(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let s = gen_data(&cfg, &out)?;
            println!(
                "train: {} text + {} mask records\ntest:  {} text + {} mask records\nwritten to {}",
                s.train_t2i,
                s.train_m2i,
                s.test_t2i,
                s.test_m2i,
                out.display()
            );
        }
        Command::Train { data, out, cfg } => {
            let cfg = resolve_config(&cfg)?;
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let (ck, log) = run_train(&cfg, &data, &out, false)?;
            let last = log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
            println!("trained {} steps, final epoch loss {last:.5}; checkpoint {}", ck.step, out.join("model.ckpt").display());
        }
        Command::Sample {
            checkpoint,
            mode,
            data,
            out,
            count,
            cfg,
        } => {
            let cfg = resolve_config(&cfg)?;
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let n = count.unwrap_or(cfg.eval.num_samples);
            let s = run_sample(&cfg, &checkpoint, mode, &data, &out, n)?;
            println!("{} {} samples written to {}", s.count, mode, out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg)?;
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("eval.json"));
            let r = run_eval(&cfg, &checkpoint, &data)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, serde_json::to_vec_pretty(&r)?)?;
            println!("{:<12} {:>8} {:>9} {:>7} {:>7} {:>7} {:>7}", "mode", "toy-FD", "toy-KID", "FS1", "FS2", "align", "acc");
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            for m in &r.modes {
                println!(
                    "{:<12} {:>8.4} {:>9.5} {:>7} {:>7} {:>7} {:>7}",
                    m.mode.name(),
                    m.toy_fd,
                    m.toy_kid,
                    opt(m.fs1),
                    opt(m.fs2),
                    opt(m.alignment),
                    opt(m.alignment_accuracy)
                );
            }
            println!("report written to {}", out.display());
        }
        Command::AblatePsplit { data, out, cfg } => {
            let cfg = resolve_config(&cfg)?;
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let rows = ablate_psplit(&cfg, &data, &out)?;
            println!("{ABLATION_HEADER}");
            for r in rows {
                println!("{}", r.csv());
            }
        }
        Command::OracleCheck { out, cfg } => {
            let cfg = resolve_config(&cfg)?;
            let checks = oracle_check(&cfg)?;
            for c in &checks {
                println!(
                    "{} {:<40} value {:.3e} tolerance {:.1e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            if let Some(out) = out {
                fs::write(&out, serde_json::to_vec_pretty(&checks)?)?;
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(3);
            }
        }
    }
    Ok(0)
}
