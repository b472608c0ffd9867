//! Mask and text conditions.
//!
//! Each modality has a reserved null value. For masks the null is a grid
//! filled with the label `K` (one past the last class), which keeps it
//! distinct from the all-background mask (label 0). For text the null is
//! token `V`, one past the descriptor vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::rng::stream;

/// Per-pixel class labels in `0..K`, or every pixel equal to `K` (null).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskCondition {
    h: usize,
    w: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl MaskCondition {
    /// Validates labels. A grid mixing null and valid pixels is rejected.
    pub fn new(h: usize, w: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("mask must be at least 1x1".into()));
        }
        if num_classes == 0 || num_classes > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "class count must lie in 1..=255, got {num_classes}"
            )));
        }
        if labels.len() != h * w {
            return Err(shape_err(h * w, labels.len()));
        }
        let null = num_classes as u8;
        if let Some(&bad) = labels.iter().find(|&&l| l > null) {
            return Err(Error::Validation(format!(
                "mask label {bad} exceeds null label {null}"
            )));
        }
        let nulls = labels.iter().filter(|&&l| l == null).count();
        if nulls != 0 && nulls != labels.len() {
            return Err(Error::Validation(format!(
                "mask mixes {nulls} null pixels with {} valid pixels",
                labels.len() - nulls
            )));
        }
        Ok(Self {
            h,
            w,
            num_classes,
            labels,
        })
    }

    pub fn null(h: usize, w: usize, num_classes: usize) -> Self {
        assert!(h > 0 && w > 0 && num_classes > 0 && num_classes <= u8::MAX as usize);
        Self {
            h,
            w,
            num_classes,
            labels: vec![num_classes as u8; h * w],
        }
    }

    pub fn is_null(&self) -> bool {
        self.labels.first() == Some(&self.null_label())
    }

    pub fn null_label(&self) -> u8 {
        self.num_classes as u8
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// One-hot encoding with `K + 1` channels; channel `K` is the null channel.
    pub fn encode(&self) -> Image {
        let ch = self.num_classes + 1;
        let mut out = Image::zeros(self.h, self.w, ch);
        let data = out.data_mut();
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * ch + l as usize] = 1.0;
        }
        out
    }

    /// 8-bit binary PGM, label = gray value.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_pgm(bytes: &[u8], num_classes: usize) -> Result<Self> {
        let (w, h, body) = parse_pgm(bytes)?;
        Self::new(h, w, num_classes, body.to_vec())
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = |m: &str| Error::Validation(format!("malformed PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", body.len(), w * h)));
    }
    Ok((w, h, body))
}

/// Descriptor token in `0..V`, or `V` for the null (empty) text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextCondition {
    token: u32,
    vocab: u32,
}

impl TextCondition {
    pub fn new(token: u32, vocab: u32) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidArgument("vocabulary must be non-empty".into()));
        }
        if token > vocab {
            return Err(Error::Validation(format!(
                "text token {token} exceeds null token {vocab}"
            )));
        }
        Ok(Self { token, vocab })
    }

    pub fn null(vocab: u32) -> Self {
        assert!(vocab > 0);
        Self {
            token: vocab,
            vocab,
        }
    }

    pub fn token(&self) -> u32 {
        self.token
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn is_null(&self) -> bool {
        self.token == self.vocab
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    /// (null mask, null text)
    Unconditional,
    /// (null mask, text)
    TextOnly,
    /// (mask, null text)
    MaskOnly,
    /// (mask, text)
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConditionPair {
    pub mask: MaskCondition,
    pub text: TextCondition,
}

impl ConditionPair {
    pub fn new(mask: MaskCondition, text: TextCondition) -> Self {
        Self { mask, text }
    }

    pub fn mode(&self) -> ConditionMode {
        match (self.mask.is_null(), self.text.is_null()) {
            (true, true) => ConditionMode::Unconditional,
            (true, false) => ConditionMode::TextOnly,
            (false, true) => ConditionMode::MaskOnly,
            (false, false) => ConditionMode::Both,
        }
    }

    /// The fully-null pair with the same mask geometry and vocabulary.
    pub fn unconditional(&self) -> Self {
        let (h, w) = self.mask.shape();
        Self {
            mask: MaskCondition::null(h, w, self.mask.num_classes()),
            text: TextCondition::null(self.text.vocab()),
        }
    }

    pub fn without_text(&self) -> Self {
        Self {
            mask: self.mask.clone(),
            text: TextCondition::null(self.text.vocab()),
        }
    }

    pub fn without_mask(&self) -> Self {
        let (h, w) = self.mask.shape();
        Self {
            mask: MaskCondition::null(h, w, self.mask.num_classes()),
            text: self.text,
        }
    }
}

/// Pairs every text with a uniformly chosen mask (the random-pairing control).
pub fn random_pairing(
    masks: &[MaskCondition],
    texts: &[TextCondition],
    seed: u64,
) -> Result<Vec<ConditionPair>> {
    if masks.is_empty() || texts.is_empty() {
        return Err(Error::InvalidArgument(
            "random pairing needs at least one mask and one text".into(),
        ));
    }
    let mut rng = stream(seed, 0x7061_6972);
    Ok(texts
        .iter()
        .map(|&text| ConditionPair::new(masks[rng.random_range(0..masks.len())].clone(), text))
        .collect())
}
