//! Evaluation on toy images: a rule-based segmenter, Dice faithfulness
//! scores, hand-made feature vectors with Fréchet distance and KID over
//! them, and a prototype-based text/image alignment score.
//!
//! Fréchet and KID values here are over toy features ("toy-FD", "toy-KID")
//! and are not comparable with Inception-based numbers.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::conditioning::{MaskCondition, TextCondition};
use crate::dataset::{gen_scene_with_token, ToyWorldSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::named_stream;

pub const HIST_BINS: usize = 8;
/// Weight of one connected component in the blob-count features.
pub const BLOB_WEIGHT: f64 = 0.125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterSpec {
    /// Colour of each class, background first.
    pub prototypes: Vec<[f32; 3]>,
    /// Cell components smaller than this many pixels become background.
    pub min_area: usize,
}

impl SegmenterSpec {
    pub fn from_world(spec: &ToyWorldSpec) -> Self {
        Self {
            prototypes: spec.palette().to_vec(),
            min_area: 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }
}

/// Nearest prototype per pixel (ties go to the lower class index), then
/// cell components under `min_area` pixels are relabelled as background.
pub fn rule_segmenter(image: &Image, spec: &SegmenterSpec) -> Result<MaskCondition> {
    if image.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "segmenter expects RGB images, got {} channels",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut labels: Vec<u8> = image
        .data()
        .chunks_exact(3)
        .map(|px| {
            let mut best = (f32::INFINITY, 0u8);
            for (k, p) in spec.prototypes.iter().enumerate() {
                let d: f32 = px.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k as u8);
                }
            }
            best.1
        })
        .collect();
    for comp in components(&labels, h, w) {
        if comp.label != 0 && comp.pixels.len() < spec.min_area {
            for &p in &comp.pixels {
                labels[p] = 0;
            }
        }
    }
    MaskCondition::new(h, w, spec.num_classes(), labels)
}

struct Component {
    label: u8,
    pixels: Vec<usize>,
}

/// 4-connected components of equal labels, in raster order of first pixel.
fn components(labels: &[u8], h: usize, w: usize) -> Vec<Component> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        let label = labels[start];
        let mut pixels = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        out.push(Component { label, pixels });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceScores {
    /// Per class including background; `None` when absent from both masks.
    pub per_class: Vec<Option<f64>>,
    /// Mean over cell classes (label >= 1) present in either mask; 1 when
    /// neither mask contains a cell.
    pub macro_cells: f64,
}

pub fn dice(a: &MaskCondition, b: &MaskCondition) -> Result<DiceScores> {
    if a.is_null() || b.is_null() {
        return Err(Error::InvalidArgument("dice is undefined for null masks".into()));
    }
    if a.shape() != b.shape() || a.num_classes() != b.num_classes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} over {} classes", a.shape(), a.num_classes()),
            got: format!("{:?} over {} classes", b.shape(), b.num_classes()),
        });
    }
    let k = a.num_classes();
    let mut inter = vec![0usize; k];
    let mut ca = vec![0usize; k];
    let mut cb = vec![0usize; k];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        ca[x as usize] += 1;
        cb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let denom = ca[c] + cb[c];
            (denom > 0).then(|| 2.0 * inter[c] as f64 / denom as f64)
        })
        .collect();
    let cells: Vec<f64> = per_class[1..].iter().flatten().copied().collect();
    let macro_cells = if cells.is_empty() {
        1.0
    } else {
        cells.iter().sum::<f64>() / cells.len() as f64
    };
    Ok(DiceScores {
        per_class,
        macro_cells,
    })
}

/// Mean cell-class Dice between the segmentation of each generated image
/// and its conditioning mask.
pub fn fs1(generated: &[Image], masks: &[MaskCondition], spec: &SegmenterSpec) -> Result<f64> {
    if generated.len() != masks.len() || generated.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fs1 needs one mask per image, got {} images and {} masks",
            generated.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for (img, m) in generated.iter().zip(masks) {
        total += dice(&rule_segmenter(img, spec)?, m)?.macro_cells;
    }
    Ok(total / generated.len() as f64)
}

/// Mean cell-class Dice between segmentations of generated and paired real
/// images.
pub fn fs2(generated: &[Image], real: &[Image], spec: &SegmenterSpec) -> Result<f64> {
    if generated.len() != real.len() || generated.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fs2 needs paired images, got {} and {}",
            generated.len(),
            real.len()
        )));
    }
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(real) {
        total += dice(&rule_segmenter(g, spec)?, &rule_segmenter(r, spec)?)?.macro_cells;
    }
    Ok(total / generated.len() as f64)
}

pub fn silver_masks(images: &[Image], spec: &SegmenterSpec) -> Result<Vec<MaskCondition>> {
    images.iter().map(|i| rule_segmenter(i, spec)).collect()
}

pub fn feature_len(num_classes: usize) -> usize {
    3 * HIST_BINS + 2 * num_classes
}

/// Channel histograms (8 bins over [-1, 1]), per-class area fractions and
/// per-class component counts scaled by `BLOB_WEIGHT`, all from the
/// segmentation.
pub fn features(image: &Image, spec: &SegmenterSpec) -> Result<Vec<f64>> {
    let mask = rule_segmenter(image, spec)?;
    let k = spec.num_classes();
    let n = (image.height() * image.width()) as f64;
    let mut f = vec![0.0; feature_len(k)];
    for px in image.data().chunks_exact(3) {
        for (ch, &v) in px.iter().enumerate() {
            let bin = (((v + 1.0) / 2.0 * HIST_BINS as f32).floor() as isize).clamp(0, HIST_BINS as isize - 1);
            f[ch * HIST_BINS + bin as usize] += 1.0 / n;
        }
    }
    let base = 3 * HIST_BINS;
    for &l in mask.labels() {
        f[base + l as usize] += 1.0 / n;
    }
    let (h, w) = mask.shape();
    for comp in components(mask.labels(), h, w) {
        f[base + k + comp.label as usize] += BLOB_WEIGHT;
    }
    Ok(f)
}

pub fn feature_matrix(images: &[Image], spec: &SegmenterSpec) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| features(i, spec)).collect()
}

fn mean_and_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut mu = DVector::zeros(d);
    for row in x {
        mu += DVector::from_column_slice(row);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in x {
        let c = DVector::from_column_slice(row) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n as f64 - 1.0).max(1.0);
    (mu, cov)
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

fn is_degenerate(cov: &DMatrix<f64>) -> bool {
    let ev = sym_eigen(cov).eigenvalues;
    let max = ev.iter().copied().fold(0.0, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= 1e-12 * max
}

/// Regularisation added to both covariances when either is singular.
pub const FRECHET_EPS: f64 = 1e-6;

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between Gaussian
/// fits of two feature sets.
pub fn frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b, 2)?;
    let (mu_a, mut sa) = mean_and_cov(a);
    let (mu_b, mut sb) = mean_and_cov(b);
    if is_degenerate(&sa) || is_degenerate(&sb) {
        let eye = DMatrix::<f64>::identity(sa.nrows(), sa.ncols()) * FRECHET_EPS;
        sa += &eye;
        sb += &eye;
    }
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let tr_sqrt: f64 = sym_eigen(&inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(Error::InvalidArgument(format!(
            "feature sets need at least {min} rows, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("feature rows differ in length".into()));
    }
    Ok(())
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with kernel `(x.y / d + 1)^3`.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b, 2)?;
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64)
}

/// Value of `kid(a, a)`: `-2/(m-1) * (mean k(x,x) - mean k(x,y))`, where
/// the second mean runs over all ordered pairs including `x = y`.
pub fn kid_self_bias(a: &[Vec<f64>]) -> f64 {
    let m = a.len() as f64;
    let diag: f64 = a.iter().map(|x| poly_kernel(x, x)).sum::<f64>() / m;
    let mut all = 0.0;
    for x in a {
        for y in a {
            all += poly_kernel(x, y);
        }
    }
    -2.0 / (m - 1.0) * (diag - all / (m * m))
}

/// Text prototypes: the mean feature of noiseless renders per token. Scores
/// are cosines after subtracting the mean of all prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub prototypes: Vec<Vec<f64>>,
    pub center: Vec<f64>,
    pub segmenter: SegmenterSpec,
}

impl AlignmentModel {
    pub fn fit(world: &ToyWorldSpec, segmenter: &SegmenterSpec, renders: usize, seed: u64) -> Result<Self> {
        world.validate()?;
        if renders == 0 {
            return Err(Error::InvalidArgument("need at least one render per token".into()));
        }
        let clean = ToyWorldSpec {
            noise_sigma: 0.0,
            ..world.clone()
        };
        let prototypes = (0..world.vocab())
            .map(|tok| {
                let mut rng = named_stream(seed, "prototype", tok as u64);
                let mut acc = vec![0.0; feature_len(segmenter.num_classes())];
                for _ in 0..renders {
                    let scene = gen_scene_with_token(&clean, tok, &mut rng);
                    for (a, v) in acc.iter_mut().zip(features(&scene.image, segmenter)?) {
                        *a += v / renders as f64;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_prototypes(prototypes, segmenter.clone()))
    }

    pub fn from_prototypes(prototypes: Vec<Vec<f64>>, segmenter: SegmenterSpec) -> Self {
        let d = prototypes[0].len();
        let mut center = vec![0.0; d];
        for p in &prototypes {
            for (c, v) in center.iter_mut().zip(p) {
                *c += v / prototypes.len() as f64;
            }
        }
        Self {
            prototypes,
            center,
            segmenter,
        }
    }

    pub fn cosine_to(&self, feature: &[f64], token: usize) -> f64 {
        let (mut dot, mut nf, mut np) = (0.0, 0.0, 0.0);
        for ((f, p), c) in feature.iter().zip(&self.prototypes[token]).zip(&self.center) {
            let (x, y) = (f - c, p - c);
            dot += x * y;
            nf += x * x;
            np += y * y;
        }
        if nf == 0.0 || np == 0.0 {
            0.0
        } else {
            (dot / (nf.sqrt() * np.sqrt())).clamp(-1.0, 1.0)
        }
    }

    pub fn score(&self, image: &Image, text: &TextCondition) -> Result<f64> {
        if text.is_null() || text.token() as usize >= self.prototypes.len() {
            return Err(Error::InvalidArgument("alignment needs a valid text token".into()));
        }
        Ok(self.cosine_to(&features(image, &self.segmenter)?, text.token() as usize))
    }

    /// Token with the highest score; ties go to the lower token.
    pub fn classify(&self, image: &Image) -> Result<u32> {
        let f = features(image, &self.segmenter)?;
        let mut best = (f64::NEG_INFINITY, 0u32);
        for k in 0..self.prototypes.len() {
            let s = self.cosine_to(&f, k);
            if s > best.0 {
                best = (s, k as u32);
            }
        }
        Ok(best.1)
    }

    /// Mean score and argmax accuracy over paired images and texts.
    pub fn evaluate(&self, images: &[Image], texts: &[TextCondition]) -> Result<(f64, f64)> {
        if images.len() != texts.len() || images.is_empty() {
            return Err(Error::InvalidArgument("alignment needs one text per image".into()));
        }
        let mut score = 0.0;
        let mut hits = 0usize;
        for (img, t) in images.iter().zip(texts) {
            score += self.score(img, t)?;
            hits += (self.classify(img)? == t.token()) as usize;
        }
        let n = images.len() as f64;
        Ok((score / n, hits as f64 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_scene;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn world() -> ToyWorldSpec {
        ToyWorldSpec::default()
    }

    fn mask(labels: &[u8], k: usize) -> MaskCondition {
        MaskCondition::new(1, labels.len(), k, labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_hand_example() {
        let d = dice(&mask(&[1, 1, 0, 0], 2), &mask(&[1, 0, 0, 0], 2)).unwrap();
        assert!((d.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.per_class[0].unwrap() - 0.8).abs() < 1e-12);
        assert!((d.macro_cells - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dice_identity_disjoint_absent() {
        let a = mask(&[0, 1, 2, 2], 4);
        let d = dice(&a, &a).unwrap();
        assert_eq!(d.per_class, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(d.macro_cells, 1.0);
        let d = dice(&mask(&[1, 1, 0, 0], 3), &mask(&[0, 0, 2, 2], 3)).unwrap();
        assert_eq!(d.per_class[1], Some(0.0));
        assert_eq!(d.macro_cells, 0.0);
        assert!(dice(&MaskCondition::null(1, 4, 3), &mask(&[0; 4], 3)).is_err());
        assert!(dice(&mask(&[0; 4], 3), &mask(&[0; 3], 3)).is_err());
    }

    proptest! {
        #[test]
        fn dice_symmetric_in_range(a in proptest::collection::vec(0u8..4, 16), b in proptest::collection::vec(0u8..4, 16)) {
            let (ma, mb) = (mask(&a, 4), mask(&b, 4));
            let x = dice(&ma, &mb).unwrap();
            let y = dice(&mb, &ma).unwrap();
            prop_assert_eq!(&x, &y);
            prop_assert!((0.0..=1.0).contains(&x.macro_cells));
            for v in x.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn kid_matches_brute_force(n in 2usize..=5, m in 2usize..=5, seed in 0u64..1000) {
            let mut r = stream(seed, 0);
            let mut rows = |k: usize| -> Vec<Vec<f64>> {
                (0..k).map(|_| (0..3).map(|_| crate::rng::normal_f64(&mut r)).collect()).collect()
            };
            let (a, b) = (rows(n), rows(m));
            let k = |x: &[f64], y: &[f64]| ((x[0]*y[0] + x[1]*y[1] + x[2]*y[2]) / 3.0 + 1.0).powi(3);
            let mut aa = 0.0;
            for i in 0..n { for j in 0..n { if i != j { aa += k(&a[i], &a[j]); } } }
            let mut bb = 0.0;
            for i in 0..m { for j in 0..m { if i != j { bb += k(&b[i], &b[j]); } } }
            let mut ab = 0.0;
            for x in &a { for y in &b { ab += k(x, y); } }
            let expect = aa / (n * (n - 1)) as f64 + bb / (m * (m - 1)) as f64 - 2.0 * ab / (n * m) as f64;
            prop_assert!((kid(&a, &b).unwrap() - expect).abs() < 1e-9 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn kid_three_by_three_by_hand() {
        let a = vec![vec![0.0], vec![1.0], vec![2.0]];
        let b = vec![vec![1.0], vec![1.0], vec![3.0]];
        // k(x, y) = (xy + 1)^3 in one dimension.
        let aa = 2.0 * (1.0 + 1.0 + 27.0) / 6.0;
        let bb = 2.0 * (8.0 + 64.0 + 64.0) / 6.0;
        let ab = (1.0 + 1.0 + 1.0 + 8.0 + 8.0 + 64.0 + 27.0 + 27.0 + 343.0) / 9.0;
        let expect = aa + bb - 2.0 * ab;
        assert!((kid(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!(kid(&a[..1], &b).is_err());
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let mut r = stream(3, 0);
        let a: Vec<Vec<f64>> = (0..500).map(|_| vec![1.0 + 2.0 * crate::rng::normal_f64(&mut r)]).collect();
        let b: Vec<Vec<f64>> = (0..400).map(|_| vec![-0.5 + 0.7 * crate::rng::normal_f64(&mut r)]).collect();
        let stats = |x: &[Vec<f64>]| {
            let n = x.len() as f64;
            let m = x.iter().map(|v| v[0]).sum::<f64>() / n;
            let s = (x.iter().map(|v| (v[0] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            (m, s)
        };
        let ((m1, s1), (m2, s2)) = (stats(&a), stats(&b));
        let expect = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        assert!((frechet(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let spec = SegmenterSpec::from_world(&world());
        let imgs: Vec<Image> = (0..60).map(|i| gen_scene(&world(), &mut stream(4, i)).image).collect();
        let other: Vec<Image> = (0..60).map(|i| gen_scene(&world(), &mut stream(5, i)).image).collect();
        let fa = feature_matrix(&imgs, &spec).unwrap();
        let fb = feature_matrix(&other, &spec).unwrap();
        assert!(frechet(&fa, &fa).unwrap() < 1e-9);
        let (x, y) = (frechet(&fa, &fb).unwrap(), frechet(&fb, &fa).unwrap());
        assert!((x - y).abs() < 1e-9 * x.max(1.0), "{x} vs {y}");
        assert!(x > 0.0);
    }

    #[test]
    fn kid_same_set_equals_its_bias() {
        // On an identical set the estimator is not zero: it equals
        // -2/(m-1) * (mean k(x,x) - mean k(x,y)) over all pairs.
        let spec = SegmenterSpec::from_world(&world());
        let imgs: Vec<Image> = (0..100).map(|i| gen_scene(&world(), &mut stream(6, i)).image).collect();
        let f = feature_matrix(&imgs, &spec).unwrap();
        let m = f.len() as f64;
        let diag: f64 = f.iter().map(|x| poly_kernel(x, x)).sum::<f64>() / m;
        let all: f64 = f.iter().flat_map(|x| f.iter().map(move |y| poly_kernel(x, y))).sum::<f64>() / (m * m);
        let bias = -2.0 / (m - 1.0) * (diag - all);
        assert!((kid(&f, &f).unwrap() - bias).abs() < 1e-12);
        assert!((kid_self_bias(&f) - bias).abs() < 1e-12);
    }

    #[test]
    fn kid_independent_draws_near_zero() {
        let spec = SegmenterSpec::from_world(&world());
        let a: Vec<Image> = (0..200).map(|i| gen_scene(&world(), &mut stream(12, i)).image).collect();
        let b: Vec<Image> = (0..200).map(|i| gen_scene(&world(), &mut stream(13, i)).image).collect();
        let v = kid(&feature_matrix(&a, &spec).unwrap(), &feature_matrix(&b, &spec).unwrap()).unwrap();
        assert!(v.abs() < 1e-3, "{v}");
    }

    #[test]
    fn segmenter_recovers_generator_masks() {
        let w = world();
        let spec = SegmenterSpec::from_world(&w);
        let mut total = 0.0;
        for i in 0..50 {
            let s = gen_scene(&w, &mut stream(8, i));
            total += dice(&rule_segmenter(&s.image, &spec).unwrap(), &s.mask).unwrap().macro_cells;
        }
        assert!(total / 50.0 >= 0.95, "{}", total / 50.0);
    }

    #[test]
    fn segmenter_background_and_ties() {
        let spec = SegmenterSpec::from_world(&world());
        let bg = Image::from_vec(2, 2, 3, world().palette()[0].repeat(4)).unwrap();
        assert!(rule_segmenter(&bg, &spec).unwrap().labels().iter().all(|&l| l == 0));
        // Equidistant from two prototypes: the lower index wins.
        let tie = SegmenterSpec {
            prototypes: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            min_area: 1,
        };
        let px = Image::from_vec(1, 1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let mid = Image::from_vec(1, 1, 3, vec![0.5, 0.0, 0.0]).unwrap();
        assert_eq!(rule_segmenter(&px, &tie).unwrap().labels(), &[0]);
        assert_eq!(rule_segmenter(&mid, &tie).unwrap().labels(), &[0]);
    }

    #[test]
    fn small_components_become_background() {
        let w = world();
        let spec = SegmenterSpec::from_world(&w);
        let mut data = w.palette()[0].repeat(9);
        data[4 * 3..4 * 3 + 3].copy_from_slice(&w.palette()[1]);
        let img = Image::from_vec(3, 3, 3, data).unwrap();
        assert!(rule_segmenter(&img, &spec).unwrap().labels().iter().all(|&l| l == 0));
        let keep = SegmenterSpec { min_area: 1, ..spec };
        assert_eq!(rule_segmenter(&img, &keep).unwrap().labels()[4], 1);
    }

    #[test]
    fn fs_scores_bounds() {
        let w = world();
        let spec = SegmenterSpec::from_world(&w);
        let scenes: Vec<_> = (0..40).map(|i| gen_scene(&w, &mut stream(9, i))).collect();
        let imgs: Vec<Image> = scenes.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<MaskCondition> = scenes.iter().map(|s| s.mask.clone()).collect();
        assert!(fs1(&imgs, &masks, &spec).unwrap() >= 0.95);
        assert_eq!(fs2(&imgs, &imgs, &spec).unwrap(), 1.0);
        let blank = vec![Image::from_vec(16, 16, 3, w.palette()[0].repeat(256)).unwrap(); 40];
        assert_eq!(fs1(&blank, &masks, &spec).unwrap(), 0.0);
        let shuffled: Vec<Image> = imgs.iter().cycle().skip(1).take(40).cloned().collect();
        assert!(fs2(&shuffled, &imgs, &spec).unwrap() < 0.5);
        assert!(fs1(&imgs[..3], &masks, &spec).is_err());
    }

    #[test]
    fn feature_layout() {
        let w = world();
        let spec = SegmenterSpec::from_world(&w);
        let s = gen_scene(&w, &mut stream(10, 0));
        let f = features(&s.image, &spec).unwrap();
        assert_eq!(f.len(), 24 + 2 * w.num_classes);
        for ch in 0..3 {
            let sum: f64 = f[ch * 8..(ch + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let area: f64 = f[24..24 + w.num_classes].iter().sum();
        assert!((area - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alignment_self_consistency() {
        let w = world();
        let spec = SegmenterSpec::from_world(&w);
        let model = AlignmentModel::fit(&w, &spec, 32, 1).unwrap();
        let clean = ToyWorldSpec {
            noise_sigma: 0.0,
            ..w.clone()
        };
        let mut hits = 0;
        let mut n = 0;
        for tok in 0..w.vocab() {
            for i in 0..20 {
                let s = gen_scene_with_token(&clean, tok, &mut stream(77, tok as u64 * 100 + i));
                hits += (model.classify(&s.image).unwrap() == tok) as usize;
                n += 1;
            }
        }
        assert_eq!(hits, n, "accuracy {}", hits as f64 / n as f64);
    }

    #[test]
    fn alignment_orthogonal_feature_scores_zero() {
        let seg = SegmenterSpec::from_world(&world());
        let model = AlignmentModel::from_prototypes(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], seg);
        assert_eq!(model.cosine_to(&[0.0, 5.0], 0), 0.0);
        assert_eq!(model.cosine_to(&[2.0, 0.0], 0), 1.0);
        assert_eq!(model.cosine_to(&[2.0, 0.0], 1), -1.0);
        let img = Image::zeros(16, 16, 3);
        assert!(AlignmentModel::fit(&world(), &model.segmenter, 1, 0)
            .unwrap()
            .score(&img, &TextCondition::null(6))
            .is_err());
    }

    #[test]
    fn silver_masks_are_valid() {
        let w = world();
        let spec = SegmenterSpec::from_world(&w);
        let imgs: Vec<Image> = (0..10).map(|i| gen_scene(&w, &mut stream(11, i)).image).collect();
        for m in silver_masks(&imgs, &spec).unwrap() {
            assert!(!m.is_null());
            assert!(m.labels().iter().all(|&l| (l as usize) < w.num_classes));
        }
    }
}
