//! Dense per-pixel containers shared by every stage of the pipeline.
//!
//! All rasters are row-major with pixel `(x, y)` = (column, row); the origin
//! is the center of the top-left pixel.

use crate::error::{Error, Result};

/// Multi-channel image with `f64` intensities, interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput(
                "image needs at least one channel".into(),
            ));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite intensity {v}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a single-channel image from a per-pixel function.
    pub fn from_fn_gray(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-averaged single-channel copy.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Separable Gaussian blur with replicated borders; the kernel is
    /// truncated at 3σ and renormalized. `sigma <= 0` returns a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (w, h, ch) = (self.width as isize, self.height as isize, self.channels);
        let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for (j, k) in kernel.iter().enumerate() {
                            let o = j as isize - radius;
                            let (sx, sy) = if horizontal {
                                ((x + o).clamp(0, w - 1), y)
                            } else {
                                (x, (y + o).clamp(0, h - 1))
                            };
                            acc += k * src[((sy * w + sx) as usize) * ch + c];
                        }
                        out[((y * w + x) as usize) * ch + c] = acc;
                    }
                }
            }
            out
        };
        let data = pass(&pass(&self.data, true), false);
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub(crate) fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() || self.channels != other.channels {
            return Err(Error::dims(self.dims(), other.dims()));
        }
        Ok(())
    }
}

/// Per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.dims() != other.dims() {
            return Err(Error::dims(self.dims(), other.dims()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(ValidityMask {
            width: self.width,
            height: self.height,
            data,
        })
    }
}

/// Dense 2D displacement field in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "flow buffer has {} vectors, expected {}",
                data.len(),
                width * height
            )));
        }
        if data.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite flow component".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, [0.0, 0.0])
    }

    pub fn constant(width: usize, height: usize, v: [f64; 2]) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 2]) {
        self.data[y * self.width + x] = v;
    }

    /// Interleaved `u, v` view of the field, length `2 * width * height`.
    pub fn as_flat(&self) -> Vec<f64> {
        self.data.iter().flat_map(|v| [v[0], v[1]]).collect()
    }

    pub fn from_flat(width: usize, height: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * width * height {
            return Err(Error::InvalidInput(format!(
                "flat flow has {} values, expected {}",
                flat.len(),
                2 * width * height
            )));
        }
        Self::new(
            width,
            height,
            flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        )
    }
}

/// Per-pixel positive depth in scene units.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(d) = data.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "depth must be finite and > 0, got {d}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, d: f64) -> Result<Self> {
        Self::new(width, height, vec![d; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Returns the map divided by `s`.
    pub fn scaled(&self, s: f64) -> Result<DepthMap> {
        DepthMap::new(
            self.width,
            self.height,
            self.data.iter().map(|d| d * s).collect(),
        )
    }
}
