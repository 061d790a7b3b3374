//! Raster containers, resampling and lossless persistence.
//!
//! Pixel intensities live in the unit interval and are stored row-major,
//! channel-interleaved (`HWC`). Network-facing code works on planar `CHW`
//! arrays; [`ImageBuffer::to_chw`] and [`ImageBuffer::from_chw`] convert.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::Array3;

use crate::error::{invalid, Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB raster with unit-interval intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if data.len() != width * height * CHANNELS {
            return invalid(format!(
                "expected {} samples for {width}x{height}x3, got {}",
                width * height * CHANNELS,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height * CHANNELS])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self { width: w as usize, height: h as usize, data }
    }

    /// Quantizes to 8 bits with round-to-nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Values after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect();
        Self { width: self.width, height: self.height, data }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Writes a lossless PNG so the per-pixel budget survives persistence.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path.as_ref(), ImageFormat::Png)?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_rgb8().write_to(&mut std::io::Cursor::new(&mut out), ImageFormat::Png)?;
        Ok(out)
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid("resize target must be positive");
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let cols = AxisWeights::bilinear(self.width, width);
        let rows = AxisWeights::bilinear(self.height, height);
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for ry in &rows.taps {
            for cx in &cols.taps {
                for c in 0..CHANNELS {
                    let v = ry.w0 * (cx.w0 * self.get(cx.i0, ry.i0, c) + cx.w1 * self.get(cx.i1, ry.i0, c))
                        + ry.w1 * (cx.w0 * self.get(cx.i0, ry.i1, c) + cx.w1 * self.get(cx.i1, ry.i1, c));
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self { width, height, data })
    }

    /// Copies a `side`×`side` window starting at (`x0`, `y0`).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return invalid("crop window outside image");
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn to_chw(&self) -> Array3<f64> {
        Array3::from_shape_fn((CHANNELS, self.height, self.width), |(c, y, x)| self.get(x, y, c))
    }

    /// Builds an image from planar data, clamping into the unit interval.
    pub fn from_chw(planes: &Array3<f64>) -> Result<Self> {
        let (c, h, w) = planes.dim();
        if c != CHANNELS {
            return invalid(format!("expected 3 planes, got {c}"));
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..CHANNELS {
                    data.push(planes[[ch, y, x]].clamp(0.0, 1.0));
                }
            }
        }
        Self::new(w, h, data)
    }

    /// Largest absolute per-sample difference.
    pub fn max_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return invalid("image dimensions differ");
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Signed per-sample offsets with the same layout as [`ImageBuffer`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PerturbationField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * CHANNELS] }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * CHANNELS {
            return invalid("perturbation dimensions do not match data length");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("perturbation contains non-finite values");
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn from_chw(planes: &Array3<f64>) -> Result<Self> {
        let (c, h, w) = planes.dim();
        if c != CHANNELS {
            return invalid(format!("expected 3 planes, got {c}"));
        }
        let data = (0..h)
            .flat_map(|y| (0..w).flat_map(move |x| (0..CHANNELS).map(move |ch| planes[[ch, y, x]])))
            .collect();
        Self::new(w, h, data)
    }

    pub fn clamp_abs(&mut self, bound: f64) {
        for v in &mut self.data {
            *v = v.clamp(-bound, bound);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Nearest-neighbour resampling; values are copied, never blended.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid("resize target must be positive");
        }
        let xs: Vec<usize> = (0..width).map(|x| nearest_index(x, self.width, width)).collect();
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            let sy = nearest_index(y, self.height, height);
            let row = &self.data[sy * self.width * CHANNELS..(sy + 1) * self.width * CHANNELS];
            for &sx in &xs {
                data.extend_from_slice(&row[sx * CHANNELS..(sx + 1) * CHANNELS]);
            }
        }
        Ok(Self { width, height, data })
    }
}

#[inline]
fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

/// One output sample's two source taps along an axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Separable bilinear weights with half-pixel centres.
#[derive(Debug, Clone)]
pub(crate) struct AxisWeights {
    pub taps: Vec<Tap>,
}

impl AxisWeights {
    pub fn bilinear(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let last = (src_len - 1) as f64;
        let taps = (0..dst_len)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                let w1 = s - i0 as f64;
                Tap { i0, i1, w0: 1.0 - w1, w1 }
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resampling of planar square-or-not arrays, with its adjoint.
#[derive(Debug, Clone)]
pub struct Resampler {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisWeights,
    cols: AxisWeights,
}

impl Resampler {
    /// Maps `(h, w)` planes to `(out_h, out_w)`.
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return invalid("resampler dimensions must be positive");
        }
        Ok(Self {
            src,
            dst,
            rows: AxisWeights::bilinear(src.0, dst.0),
            cols: AxisWeights::bilinear(src.1, dst.1),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = x.dim();
        if (h, w) != self.src {
            return Err(Error::InvalidArgument(format!(
                "resampler expects {:?}, got ({h}, {w})",
                self.src
            )));
        }
        if self.is_identity() {
            return Ok(x.clone());
        }
        let mut out = Array3::zeros((c, self.dst.0, self.dst.1));
        for ch in 0..c {
            for (oy, r) in self.rows.taps.iter().enumerate() {
                for (ox, t) in self.cols.taps.iter().enumerate() {
                    out[[ch, oy, ox]] = r.w0 * (t.w0 * x[[ch, r.i0, t.i0]] + t.w1 * x[[ch, r.i0, t.i1]])
                        + r.w1 * (t.w0 * x[[ch, r.i1, t.i0]] + t.w1 * x[[ch, r.i1, t.i1]]);
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Resampler::apply`]: pulls an output-space gradient back to the source grid.
    pub fn adjoint(&self, g: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = g.dim();
        if (h, w) != self.dst {
            return invalid("adjoint input does not match resampler output shape");
        }
        if self.is_identity() {
            return Ok(g.clone());
        }
        let mut out = Array3::zeros((c, self.src.0, self.src.1));
        for ch in 0..c {
            for (oy, r) in self.rows.taps.iter().enumerate() {
                for (ox, t) in self.cols.taps.iter().enumerate() {
                    let v = g[[ch, oy, ox]];
                    out[[ch, r.i0, t.i0]] += r.w0 * t.w0 * v;
                    out[[ch, r.i0, t.i1]] += r.w0 * t.w1 * v;
                    out[[ch, r.i1, t.i0]] += r.w1 * t.w0 * v;
                    out[[ch, r.i1, t.i1]] += r.w1 * t.w1 * v;
                }
            }
        }
        Ok(out)
    }
}
