//! Procedural unpaired corpora.
//!
//! Two generators are provided: a toy "tissue" world of coloured discs on a
//! tinted background (image + class mask + descriptor token), and a grid of
//! isotropic Gaussians whose row is selected by the mask and column by the
//! text. Either generator is split into two halves with disjoint scene ids:
//! the text half keeps `(image, null mask, text)` and the mask half keeps
//! `(image, mask, null text)`. The withheld modality is stored in a separate
//! ground-truth table used only for evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{ConditionPair, MaskCondition, TextCondition};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{named_stream, normal_f32, normal_f64, stream, StreamRng};

/// Background followed by cell classes, RGB in [-1, 1]. Cell colours are
/// well separated in the R/B plane; the hue tint only moves the G channel.
pub const PALETTE: [[f32; 3]; 6] = [
    [0.625, 0.375, 0.625],
    [-0.625, -0.375, 0.625],
    [-0.625, -0.375, -0.625],
    [0.625, -0.125, -0.625],
    [0.0, -0.625, 0.0],
    [-0.625, 0.625, 0.0],
];

/// Largest G-channel tint magnitude across hues.
pub const MAX_TINT: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldSpec {
    pub height: usize,
    pub width: usize,
    /// Class count including background.
    pub num_classes: usize,
    pub n_hues: usize,
    pub n_densities: usize,
    /// Inclusive per-class blob count range at the lowest density.
    pub blob_count: (usize, usize),
    /// Density index `d` multiplies the blob count by `1 + density_step * d`.
    pub density_step: usize,
    pub blob_radius: (f32, f32),
    pub noise_sigma: f32,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 4,
            n_hues: 3,
            n_densities: 2,
            blob_count: (1, 1),
            density_step: 3,
            blob_radius: (1.5, 2.0),
            noise_sigma: 0.05,
        }
    }
}

impl ToyWorldSpec {
    pub fn vocab(&self) -> u32 {
        (self.n_hues * self.n_densities) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Validation(m));
        if self.num_classes < 2 || self.num_classes > PALETTE.len() {
            return err(format!("num_classes must lie in 2..={}", PALETTE.len()));
        }
        if self.n_hues == 0 || self.n_densities == 0 || self.vocab() < 2 {
            return err("descriptor vocabulary must have at least two tokens".into());
        }
        if self.blob_count.0 > self.blob_count.1 {
            return err("blob_count range is inverted".into());
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return err("blob_radius must satisfy 0 < min <= max".into());
        }
        if 2.0 * r1 > self.height.min(self.width) as f32 {
            return err("blob radius does not fit inside the image".into());
        }
        if self.noise_sigma < 0.0 {
            return err("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// `(hue, density)` factors of a token.
    pub fn factors(&self, token: u32) -> (usize, usize) {
        let t = token as usize;
        (t / self.n_densities, t % self.n_densities)
    }

    pub fn token(&self, hue: usize, density: usize) -> u32 {
        (hue * self.n_densities + density) as u32
    }

    pub fn tint(&self, hue: usize) -> f32 {
        if self.n_hues == 1 {
            0.0
        } else {
            -MAX_TINT + 2.0 * MAX_TINT * hue as f32 / (self.n_hues - 1) as f32
        }
    }

    /// Untinted class colours, the segmenter's prototypes.
    pub fn palette(&self) -> &[[f32; 3]] {
        &PALETTE[..self.num_classes]
    }
}

/// Ground-truth triple; training never sees all three together.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub mask: MaskCondition,
    pub text: TextCondition,
}

const PLACEMENT_ATTEMPTS: usize = 64;
/// Minimum spacing between disc edges, in pixels.
const BLOB_GAP: f32 = 1.0;

pub fn gen_scene(spec: &ToyWorldSpec, rng: &mut StreamRng) -> Scene {
    let token = rng.random_range(0..spec.vocab());
    gen_scene_with_token(spec, token, rng)
}

/// Renders a scene for a fixed descriptor. Discs are placed apart when they
/// fit; where they cannot, classes are painted in index order, so a later
/// class overwrites an earlier one.
pub fn gen_scene_with_token(spec: &ToyWorldSpec, token: u32, rng: &mut StreamRng) -> Scene {
    let (hue, density) = spec.factors(token);
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    let scale = 1 + spec.density_step * density;
    let mut placed: Vec<(f32, f32, f32)> = Vec::new();
    for class in 1..spec.num_classes {
        let count = rng.random_range(spec.blob_count.0..=spec.blob_count.1) * scale;
        for _ in 0..count {
            let r = if spec.blob_radius.0 < spec.blob_radius.1 {
                rng.random_range(spec.blob_radius.0..spec.blob_radius.1)
            } else {
                spec.blob_radius.0
            };
            // Rejection sampling keeps discs apart; after the last attempt the
            // disc goes where it landed and may overlap.
            let mut centre = (0.0, 0.0);
            for _ in 0..PLACEMENT_ATTEMPTS {
                centre = (
                    rng.random_range(r..=(h as f32 - r)),
                    rng.random_range(r..=(w as f32 - r)),
                );
                let clear = placed.iter().all(|&(py, px, pr)| {
                    let (dy, dx) = (centre.0 - py, centre.1 - px);
                    (dy * dy + dx * dx).sqrt() >= r + pr + BLOB_GAP
                });
                if clear {
                    break;
                }
            }
            placed.push((centre.0, centre.1, r));
            paint_disc(&mut labels, h, w, centre.0, centre.1, r, class as u8);
        }
    }
    let tint = spec.tint(hue);
    let mut image = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let base = PALETTE[labels[y * w + x] as usize];
            let px = image.pixel_mut(y, x);
            for ch in 0..3 {
                let mut v = base[ch] + if ch == 1 { tint } else { 0.0 };
                if spec.noise_sigma > 0.0 {
                    v += spec.noise_sigma * normal_f32(rng);
                }
                px[ch] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Scene {
        image,
        mask: MaskCondition::new(h, w, spec.num_classes, labels).expect("generator labels are valid"),
        text: TextCondition::new(token, spec.vocab()).expect("generator token is valid"),
    }
}

fn paint_disc(labels: &mut [u8], h: usize, w: usize, cy: f32, cx: f32, r: f32, class: u8) {
    for y in 0..h {
        for x in 0..w {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                labels[y * w + x] = class;
            }
        }
    }
}

/// Gaussian components on a `rows × cols` grid. The mask label selects the
/// row and the text token selects the column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmGrid {
    /// `means[row][col]` is a point in `dim` dimensions.
    pub means: Vec<Vec<Vec<f64>>>,
    pub sigma: f64,
}

impl GmmGrid {
    /// 2-D grid with `means[r][c] = (xs[c], ys[r])`.
    pub fn axis_aligned(xs: &[f64], ys: &[f64], sigma: f64) -> Self {
        Self {
            means: ys
                .iter()
                .map(|&y| xs.iter().map(|&x| vec![x, y]).collect())
                .collect(),
            sigma,
        }
    }

    /// The 2×2 grid with means at {-3, +3}² and sigma 0.5.
    pub fn quadrants() -> Self {
        Self::axis_aligned(&[-3.0, 3.0], &[-3.0, 3.0], 0.5)
    }

    pub fn rows(&self) -> usize {
        self.means.len()
    }

    pub fn cols(&self) -> usize {
        self.means.first().map_or(0, |r| r.len())
    }

    pub fn dim(&self) -> usize {
        self.means
            .first()
            .and_then(|r| r.first())
            .map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols, dim) = (self.rows(), self.cols(), self.dim());
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::Validation("gaussian grid must be non-empty".into()));
        }
        if rows > u8::MAX as usize - 1 {
            return Err(Error::Validation("too many grid rows".into()));
        }
        if self
            .means
            .iter()
            .any(|r| r.len() != cols || r.iter().any(|m| m.len() != dim))
        {
            return Err(Error::Validation("gaussian grid must be rectangular".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Validation("sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, row: usize, col: usize, rng: &mut R) -> Image {
        let data = self.means[row][col]
            .iter()
            .map(|&m| (m + self.sigma * normal_f64(rng)) as f32)
            .collect();
        Image::from_vec(1, 1, self.dim(), data).expect("dim matches")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Generator {
    Toy(ToyWorldSpec),
    Gmm(GmmGrid),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub image: Image,
    pub cond: ConditionPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedCorpus {
    pub generator: Generator,
    pub seed: u64,
    pub shape: (usize, usize, usize),
    pub num_classes: usize,
    pub vocab: u32,
    /// Image + text, null mask.
    pub t2i: Vec<Record>,
    /// Image + mask, null text.
    pub m2i: Vec<Record>,
}

/// The withheld modality of every scene, keyed by scene id. Evaluation only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub entries: BTreeMap<u64, ConditionPair>,
}

impl GroundTruth {
    pub fn get(&self, id: u64) -> Option<&ConditionPair> {
        self.entries.get(&id)
    }
}

impl UnpairedCorpus {
    pub fn len(&self) -> usize {
        self.t2i.len() + self.m2i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn null_mask(&self) -> MaskCondition {
        MaskCondition::null(self.shape.0, self.shape.1, self.num_classes)
    }

    pub fn null_text(&self) -> TextCondition {
        TextCondition::null(self.vocab)
    }

    /// Checks that no record carries both modalities and that the halves
    /// share no scene.
    pub fn validate(&self) -> Result<()> {
        for r in &self.t2i {
            if !r.cond.mask.is_null() || r.cond.text.is_null() {
                return Err(Error::Validation(format!(
                    "text record {} must carry a null mask and a valid text",
                    r.id
                )));
            }
        }
        for r in &self.m2i {
            if r.cond.mask.is_null() || !r.cond.text.is_null() {
                return Err(Error::Validation(format!(
                    "mask record {} must carry a valid mask and a null text",
                    r.id
                )));
            }
        }
        for r in self.t2i.iter().chain(&self.m2i) {
            if r.image.shape() != self.shape {
                return Err(Error::Validation(format!("record {} has the wrong shape", r.id)));
            }
        }
        let a: BTreeSet<u64> = self.t2i.iter().map(|r| r.id).collect();
        let b: BTreeSet<u64> = self.m2i.iter().map(|r| r.id).collect();
        if a.len() != self.t2i.len() || b.len() != self.m2i.len() {
            return Err(Error::Validation("duplicate scene ids".into()));
        }
        if let Some(id) = a.intersection(&b).next() {
            return Err(Error::Validation(format!("scene {id} appears in both halves")));
        }
        Ok(())
    }
}

fn unpair(
    generator: Generator,
    seed: u64,
    shape: (usize, usize, usize),
    num_classes: usize,
    vocab: u32,
    n_t2i: usize,
    scenes: Vec<Scene>,
) -> (UnpairedCorpus, GroundTruth) {
    let mut corpus = UnpairedCorpus {
        generator,
        seed,
        shape,
        num_classes,
        vocab,
        t2i: Vec::with_capacity(n_t2i),
        m2i: Vec::with_capacity(scenes.len() - n_t2i),
    };
    let mut truth = GroundTruth::default();
    for (id, scene) in scenes.into_iter().enumerate() {
        let id = id as u64;
        let full = ConditionPair::new(scene.mask, scene.text);
        let (record_cond, half) = if (id as usize) < n_t2i {
            (full.without_mask(), &mut corpus.t2i)
        } else {
            (full.without_text(), &mut corpus.m2i)
        };
        half.push(Record {
            id,
            image: scene.image,
            cond: record_cond,
        });
        truth.entries.insert(id, full);
    }
    (corpus, truth)
}

/// Generates `n_t2i + n_m2i` distinct scenes and splits them into the two
/// unpaired halves. Scene `i` uses its own random stream derived from `seed`.
pub fn make_unpaired(
    spec: &ToyWorldSpec,
    n_t2i: usize,
    n_m2i: usize,
    seed: u64,
) -> Result<(UnpairedCorpus, GroundTruth)> {
    spec.validate()?;
    if n_t2i == 0 || n_m2i == 0 {
        return Err(Error::InvalidArgument("both halves need at least one scene".into()));
    }
    let scenes: Vec<Scene> = (0..(n_t2i + n_m2i) as u64)
        .into_par_iter()
        .map(|id| gen_scene(spec, &mut stream(seed, id)))
        .collect();
    Ok(unpair(
        Generator::Toy(spec.clone()),
        seed,
        (spec.height, spec.width, 3),
        spec.num_classes,
        spec.vocab(),
        n_t2i,
        scenes,
    ))
}

/// Unpaired corpus of `1 × 1 × dim` "images" drawn from a Gaussian grid.
/// Each scene picks a grid cell uniformly; its mask is the 1×1 row label
/// and its text is the column token.
pub fn gen_gmm_corpus(
    grid: &GmmGrid,
    n_t2i: usize,
    n_m2i: usize,
    seed: u64,
) -> Result<(UnpairedCorpus, GroundTruth)> {
    grid.validate()?;
    if n_t2i == 0 || n_m2i == 0 {
        return Err(Error::InvalidArgument("both halves need at least one scene".into()));
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let scenes: Vec<Scene> = (0..(n_t2i + n_m2i) as u64)
        .map(|id| {
            let mut rng = stream(seed, id);
            let row = rng.random_range(0..rows);
            let col = rng.random_range(0..cols);
            Scene {
                image: grid.sample(row, col, &mut rng),
                mask: MaskCondition::new(1, 1, rows, vec![row as u8]).expect("row label valid"),
                text: TextCondition::new(col as u32, cols as u32).expect("column token valid"),
            }
        })
        .collect();
    Ok(unpair(
        Generator::Gmm(grid.clone()),
        seed,
        (1, 1, grid.dim()),
        rows,
        cols as u32,
        n_t2i,
        scenes,
    ))
}

/// Shuffled train/test split applied independently to each half.
pub fn split(
    corpus: &UnpairedCorpus,
    ratio: f64,
    seed: u64,
) -> Result<(UnpairedCorpus, UnpairedCorpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let split_half = |records: &[Record], key: &str| -> Result<(Vec<Record>, Vec<Record>)> {
        let n = records.len();
        let n_train = (ratio * n as f64).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::InvalidArgument(format!(
                "split of {n} {key} records at ratio {ratio} leaves one side empty"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut named_stream(seed, key, 0));
        let (a, b) = idx.split_at(n_train);
        let pick = |ix: &[usize]| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            ix.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
        };
        Ok((pick(a), pick(b)))
    };
    let (t_train, t_test) = split_half(&corpus.t2i, "split-t2i")?;
    let (m_train, m_test) = split_half(&corpus.m2i, "split-m2i")?;
    let with = |t2i, m2i| UnpairedCorpus {
        t2i,
        m2i,
        ..corpus.clone_meta()
    };
    Ok((with(t_train, m_train), with(t_test, m_test)))
}

impl UnpairedCorpus {
    fn clone_meta(&self) -> UnpairedCorpus {
        UnpairedCorpus {
            generator: self.generator.clone(),
            seed: self.seed,
            shape: self.shape,
            num_classes: self.num_classes,
            vocab: self.vocab,
            t2i: Vec::new(),
            m2i: Vec::new(),
        }
    }
}

pub const CORPUS_FORMAT: &str = "dualdiff-corpus/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    generator: Generator,
    seed: u64,
    shape: [usize; 3],
    num_classes: usize,
    vocab: u32,
    counts: Counts,
    t2i: Vec<TextEntry>,
    m2i: Vec<MaskEntry>,
    #[serde(default)]
    eval_only: Vec<TruthEntry>,
    /// Free-form record of how the corpus was made.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    provenance: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Counts {
    t2i: usize,
    m2i: usize,
    eval_only: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextEntry {
    id: u64,
    image: String,
    image_sha256: String,
    text: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    id: u64,
    image: String,
    image_sha256: String,
    mask: String,
    mask_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthEntry {
    id: u64,
    text: u32,
    mask: String,
    mask_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(rel);
    fs::write(&path, bytes).map_err(|e| Error::file(&path, e.to_string()))?;
    Ok(sha256_hex(bytes))
}

fn read_checked(dir: &Path, rel: &str, sha: &str) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::file(&path, e.to_string()))?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::file(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

/// Writes `manifest.json`, `images/*.f32` and `masks/*.pgm`. Ground truth,
/// if given, goes to the manifest's `eval_only` section.
pub fn save_corpus(corpus: &UnpairedCorpus, truth: Option<&GroundTruth>, dir: &Path) -> Result<()> {
    save_corpus_with(corpus, truth, dir, serde_json::Value::Null)
}

/// [`save_corpus`] with a provenance record stored in the manifest.
pub fn save_corpus_with(
    corpus: &UnpairedCorpus,
    truth: Option<&GroundTruth>,
    dir: &Path,
    provenance: serde_json::Value,
) -> Result<()> {
    corpus.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut t2i = Vec::with_capacity(corpus.t2i.len());
    for r in &corpus.t2i {
        let image = format!("images/{:08}.f32", r.id);
        let image_sha256 = write_file(dir, &image, &r.image.to_le_bytes())?;
        t2i.push(TextEntry {
            id: r.id,
            image,
            image_sha256,
            text: r.cond.text.token(),
        });
    }
    let mut m2i = Vec::with_capacity(corpus.m2i.len());
    for r in &corpus.m2i {
        let image = format!("images/{:08}.f32", r.id);
        let image_sha256 = write_file(dir, &image, &r.image.to_le_bytes())?;
        let mask = format!("masks/{:08}.pgm", r.id);
        let mask_sha256 = write_file(dir, &mask, &r.cond.mask.to_pgm())?;
        m2i.push(MaskEntry {
            id: r.id,
            image,
            image_sha256,
            mask,
            mask_sha256,
        });
    }
    let ids: BTreeSet<u64> = corpus.t2i.iter().chain(&corpus.m2i).map(|r| r.id).collect();
    let mut eval_only = Vec::new();
    if let Some(truth) = truth {
        for id in ids {
            let Some(full) = truth.get(id) else { continue };
            let mask = format!("masks/truth_{id:08}.pgm");
            let mask_sha256 = write_file(dir, &mask, &full.mask.to_pgm())?;
            eval_only.push(TruthEntry {
                id,
                text: full.text.token(),
                mask,
                mask_sha256,
            });
        }
    }
    let manifest = Manifest {
        format: CORPUS_FORMAT.into(),
        generator: corpus.generator.clone(),
        seed: corpus.seed,
        shape: [corpus.shape.0, corpus.shape.1, corpus.shape.2],
        num_classes: corpus.num_classes,
        vocab: corpus.vocab,
        counts: Counts {
            t2i: t2i.len(),
            m2i: m2i.len(),
            eval_only: eval_only.len(),
        },
        t2i,
        m2i,
        eval_only,
        provenance,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::file(&path, e.to_string()))?;
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::file(&path, e.to_string()))?;
    if m.format != CORPUS_FORMAT {
        return Err(Error::file(&path, format!("unsupported format {:?}", m.format)));
    }
    let counts = Counts {
        t2i: m.t2i.len(),
        m2i: m.m2i.len(),
        eval_only: m.eval_only.len(),
    };
    if counts != m.counts {
        return Err(Error::file(&path, "declared counts do not match entries"));
    }
    Ok(m)
}

/// Loads the two training halves. The ground-truth section is not read.
pub fn load_corpus(dir: &Path) -> Result<UnpairedCorpus> {
    let m = read_manifest(dir)?;
    let [h, w, c] = m.shape;
    let load_image = |rel: &str, sha: &str| -> Result<Image> {
        let bytes = read_checked(dir, rel, sha)?;
        Image::from_le_bytes(h, w, c, &bytes).map_err(|e| Error::file(dir.join(rel), e.to_string()))
    };
    let null_mask = MaskCondition::null(h, w, m.num_classes);
    let null_text = TextCondition::null(m.vocab);
    let mut t2i = Vec::with_capacity(m.t2i.len());
    for e in &m.t2i {
        let text = TextCondition::new(e.text, m.vocab)?;
        t2i.push(Record {
            id: e.id,
            image: load_image(&e.image, &e.image_sha256)?,
            cond: ConditionPair::new(null_mask.clone(), text),
        });
    }
    let mut m2i = Vec::with_capacity(m.m2i.len());
    for e in &m.m2i {
        let bytes = read_checked(dir, &e.mask, &e.mask_sha256)?;
        let mask = MaskCondition::from_pgm(&bytes, m.num_classes)
            .map_err(|err| Error::file(dir.join(&e.mask), err.to_string()))?;
        m2i.push(Record {
            id: e.id,
            image: load_image(&e.image, &e.image_sha256)?,
            cond: ConditionPair::new(mask, null_text),
        });
    }
    let corpus = UnpairedCorpus {
        generator: m.generator,
        seed: m.seed,
        shape: (h, w, c),
        num_classes: m.num_classes,
        vocab: m.vocab,
        t2i,
        m2i,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// SHA-256 of a corpus manifest, which covers every file through its checksums.
pub fn manifest_checksum(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::file(&path, e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

/// Reads the evaluation-only ground-truth section.
pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let m = read_manifest(dir)?;
    let mut truth = GroundTruth::default();
    for e in &m.eval_only {
        let bytes = read_checked(dir, &e.mask, &e.mask_sha256)?;
        let mask = MaskCondition::from_pgm(&bytes, m.num_classes)
            .map_err(|err| Error::file(dir.join(&e.mask), err.to_string()))?;
        let text = TextCondition::new(e.text, m.vocab)?;
        truth.entries.insert(e.id, ConditionPair::new(mask, text));
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyWorldSpec {
        ToyWorldSpec::default()
    }

    #[test]
    fn empty_noiseless_scene_is_background() {
        let spec = ToyWorldSpec {
            blob_count: (0, 0),
            noise_sigma: 0.0,
            ..small()
        };
        let s = gen_scene(&spec, &mut stream(3, 0));
        assert!(s.mask.labels().iter().all(|&l| l == 0));
        let (hue, _) = spec.factors(s.text.token());
        let expect = [PALETTE[0][0], PALETTE[0][1] + spec.tint(hue), PALETTE[0][2]];
        for y in 0..spec.height {
            for x in 0..spec.width {
                assert_eq!(s.image.pixel(y, x), &expect);
            }
        }
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        let a = gen_scene(&small(), &mut stream(5, 9));
        let b = gen_scene(&small(), &mut stream(5, 9));
        assert_eq!(a, b);
        let c = gen_scene(&small(), &mut stream(5, 10));
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn images_stay_in_range() {
        let spec = ToyWorldSpec {
            noise_sigma: 0.5,
            ..small()
        };
        let s = gen_scene(&spec, &mut stream(1, 1));
        assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn density_scales_blob_counts() {
        let spec = ToyWorldSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let area = |d: usize| -> f64 {
            (0..50)
                .map(|i| {
                    let s = gen_scene_with_token(&spec, spec.token(0, d), &mut stream(2, i));
                    s.mask.labels().iter().filter(|&&l| l != 0).count() as f64
                })
                .sum::<f64>()
        };
        assert!(area(1) > 1.5 * area(0));
    }

    #[test]
    fn spec_validation() {
        assert!(small().validate().is_ok());
        let bad = ToyWorldSpec {
            blob_radius: (1.0, 9.0),
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = ToyWorldSpec {
            num_classes: 1,
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = ToyWorldSpec {
            n_hues: 1,
            n_densities: 1,
            ..small()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unpaired_halves_are_disjoint_and_single_modality() {
        let (c, truth) = make_unpaired(&small(), 100, 100, 4).unwrap();
        assert_eq!((c.t2i.len(), c.m2i.len()), (100, 100));
        assert!(c.t2i.iter().all(|r| r.cond.mask.is_null() && !r.cond.text.is_null()));
        assert!(c.m2i.iter().all(|r| !r.cond.mask.is_null() && r.cond.text.is_null()));
        let a: BTreeSet<_> = c.t2i.iter().map(|r| r.id).collect();
        let b: BTreeSet<_> = c.m2i.iter().map(|r| r.id).collect();
        assert!(a.is_disjoint(&b));
        c.validate().unwrap();
        assert_eq!(truth.entries.len(), 200);
        for r in &c.t2i {
            assert_eq!(truth.get(r.id).unwrap().text, r.cond.text);
        }
        for r in &c.m2i {
            assert_eq!(truth.get(r.id).unwrap().mask, r.cond.mask);
        }
    }

    #[test]
    fn text_tokens_roughly_uniform() {
        let spec = small();
        let n = 3000;
        let (c, _) = make_unpaired(&spec, n, 1, 8).unwrap();
        let v = spec.vocab() as usize;
        let p = 1.0 / v as f64;
        let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
        let mut hist = vec![0usize; v];
        for r in &c.t2i {
            hist[r.cond.text.token() as usize] += 1;
        }
        for (tok, &k) in hist.iter().enumerate() {
            let f = k as f64 / n as f64;
            assert!((f - p).abs() < tol, "token {tok}: {f}");
        }
    }

    #[test]
    fn paired_record_is_rejected() {
        let (mut c, truth) = make_unpaired(&small(), 3, 3, 4).unwrap();
        c.t2i[0].cond = truth.get(c.t2i[0].id).unwrap().clone();
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_counts_and_partition() {
        let (c, _) = make_unpaired(&small(), 10, 10, 1).unwrap();
        let (train, test) = split(&c, 0.8, 2).unwrap();
        assert_eq!((train.t2i.len(), test.t2i.len()), (8, 2));
        assert_eq!((train.m2i.len(), test.m2i.len()), (8, 2));
        let mut ids: Vec<u64> = train.t2i.iter().chain(&test.t2i).map(|r| r.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        let (train2, _) = split(&c, 0.8, 2).unwrap();
        assert_eq!(train, train2);
        let (train3, _) = split(&c, 0.8, 3).unwrap();
        assert_ne!(
            train.t2i.iter().map(|r| r.id).collect::<Vec<_>>(),
            train3.t2i.iter().map(|r| r.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn degenerate_split_errors() {
        let (c, _) = make_unpaired(&small(), 1, 5, 1).unwrap();
        assert!(split(&c, 0.8, 0).is_err());
        let (c, _) = make_unpaired(&small(), 5, 5, 1).unwrap();
        assert!(split(&c, 1.0, 0).is_err());
        assert!(split(&c, 0.0, 0).is_err());
    }

    #[test]
    fn gmm_column_means() {
        let grid = GmmGrid::quadrants();
        let (c, _) = gen_gmm_corpus(&grid, 2000, 10, 3).unwrap();
        let right: Vec<f64> = c
            .t2i
            .iter()
            .filter(|r| r.cond.text.token() == 1)
            .map(|r| r.image.data()[0] as f64)
            .collect();
        let n = right.len() as f64;
        assert!(n > 800.0);
        let mean = right.iter().sum::<f64>() / n;
        assert!((mean - 3.0).abs() < 4.0 * 0.5 / n.sqrt(), "{mean}");
    }

    #[test]
    fn gmm_single_component() {
        let grid = GmmGrid::axis_aligned(&[3.0], &[-2.0], 0.5);
        let (c, truth) = gen_gmm_corpus(&grid, 5, 5, 0).unwrap();
        assert_eq!(c.num_classes, 1);
        assert_eq!(c.vocab, 1);
        assert!(truth.entries.values().all(|p| p.mask.labels() == [0] && p.text.token() == 0));
        c.validate().unwrap();
    }

    #[test]
    fn gmm_grid_indexing() {
        let grid = GmmGrid::quadrants();
        // Column 1 is x = +3 ("right"), row 1 is y = +3 ("top").
        assert_eq!(grid.means[1][1], vec![3.0, 3.0]);
        assert_eq!(grid.means[0][1], vec![3.0, -3.0]);
        assert_eq!(grid.means[1][0], vec![-3.0, 3.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (c, truth) = make_unpaired(&small(), 4, 5, 12).unwrap();
        save_corpus(&c, Some(&truth), dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded, c);
        assert_eq!(load_ground_truth(dir.path()).unwrap(), truth);
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["counts"]["t2i"], 4);
        assert_eq!(manifest["counts"]["m2i"], 5);
        let n_images = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(n_images, 9);
    }

    #[test]
    fn gmm_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (c, _) = gen_gmm_corpus(&GmmGrid::quadrants(), 6, 6, 2).unwrap();
        save_corpus(&c, None, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
        assert!(load_ground_truth(dir.path()).unwrap().entries.is_empty());
    }

    #[test]
    fn corrupted_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (c, _) = make_unpaired(&small(), 2, 2, 12).unwrap();
        save_corpus(&c, None, dir.path()).unwrap();
        let victim = dir.path().join("images/00000001.f32");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("00000001.f32"), "{err}");
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn missing_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn smuggled_mask_in_text_half_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let (c, _) = make_unpaired(&small(), 2, 2, 12).unwrap();
        save_corpus(&c, None, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["t2i"][0]["mask"] = serde_json::json!("masks/00000002.pgm");
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }
}
