use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};

/// Fixed-size real-valued grid, channel-last (`h × w × c`), nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err(h * w * c, data.len()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let o = (y * self.w + x) * self.c;
        &mut self.data[o..o + self.c]
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn clamp(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Raw little-endian f32 bytes, row-major, channel-last.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(h: usize, w: usize, c: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != h * w * c * 4 {
            return Err(shape_err(h * w * c * 4, bytes.len()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { h, w, c, data })
    }
}

/// Maps [-1, 1] to 0..=255.
fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Writes images as a binary PPM grid, `cols` tiles per row with a 1-pixel
/// black gutter. Single-channel images are replicated to gray.
pub fn write_ppm_grid(path: &Path, images: &[Image], cols: usize) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to write".into()))?;
    let (h, w, c) = first.shape();
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM output needs 1 or 3 channels, got {c}"
        )));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * (w + 1) + 1;
    let gh = rows * (h + 1) + 1;
    let mut buf = vec![0u8; gw * gh * 3];
    for (i, img) in images.iter().enumerate() {
        img.ensure_same_shape(first)?;
        let oy = (i / cols) * (h + 1) + 1;
        let ox = (i % cols) * (w + 1) + 1;
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(y, x);
                let o = ((oy + y) * gw + ox + x) * 3;
                for ch in 0..3 {
                    buf[o + ch] = to_u8(p[if c == 1 { 0 } else { ch }]);
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{gw} {gh}\n255\n")?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}
