use num_complex::Complex64;

use crate::error::{Error, Result};

/// `channels × height × width` complex samples, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexFeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ComplexFeatureMap {
            channels,
            height,
            width,
            data: vec![Complex64::default(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("feature map dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} samples for a {channels}×{height}×{width} map",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.is_finite()) {
            return Err(Error::Domain("feature map samples must be finite".into()));
        }
        Ok(ComplexFeatureMap { channels, height, width, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for w in 0..width {
                    data.push(f(c, r, w));
                }
            }
        }
        ComplexFeatureMap { channels, height, width, data }
    }

    /// Lifts a real image with zero imaginary part.
    pub fn from_real(image: &RealImage) -> Self {
        ComplexFeatureMap {
            channels: image.channels(),
            height: image.height(),
            width: image.width(),
            data: image.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [Complex64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, r: usize, w: usize) -> Complex64 {
        self.data[(c * self.height + r) * self.width + w]
    }

    pub fn set(&mut self, c: usize, r: usize, w: usize, v: Complex64) {
        self.data[(c * self.height + r) * self.width + w] = v;
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        ComplexFeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `Re ⟨self, other⟩ = Re Σ self · conj(other)`.
    pub fn real_inner(&self, other: &ComplexFeatureMap) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a * b.conj()).re).sum()
    }

    /// Stacks maps with the same spatial size along the channel axis.
    pub fn concat(parts: &[&ComplexFeatureMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("nothing to concatenate"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::shape("concatenated maps must share a spatial size"));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(ComplexFeatureMap { channels, height: h, width: w, data })
    }

    /// Splits off channel ranges; inverse of [`concat`](Self::concat).
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<ComplexFeatureMap>> {
        if sizes.iter().sum::<usize>() != self.channels {
            return Err(Error::shape("split sizes do not cover the channels"));
        }
        let p = self.plane();
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let part = ComplexFeatureMap {
                    channels: n,
                    height: self.height,
                    width: self.width,
                    data: self.data[start * p..(start + n) * p].to_vec(),
                };
                start += n;
                part
            })
            .collect())
    }
}

/// `channels × height × width` real pixels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {channels}×{height}×{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image pixels must be finite".into()));
        }
        Ok(RealImage { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    /// Mirror along the column axis.
    pub fn flipped_horizontally(&self) -> RealImage {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        RealImage { data, ..*self }
    }

    /// Crop of the image zero-padded by `pad` on every side, starting at
    /// `(top, left)` in padded coordinates; the output keeps the input size.
    pub fn padded_crop(&self, pad: usize, top: usize, left: usize) -> RealImage {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for r in 0..h {
                let sr = (r + top) as isize - pad as isize;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for col in 0..w {
                    let sc = (col + left) as isize - pad as isize;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    data[(c * h + r) * w + col] = self.data[(c * h + sr as usize) * w + sc as usize];
                }
            }
        }
        RealImage { data, ..*self }
    }
}
