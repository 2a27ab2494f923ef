use num_complex::Complex64;

use super::conv::{direct_plane, filter_spectrum, FFT_AREA_THRESHOLD};
use super::ComplexFeatureMap;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::filterbank::FilterBank;

/// A filter bank bound to one input size, with filter spectra precomputed.
///
/// Output channel `c·(L+1) + ℓ` holds `x_c ∗ g_ℓ`, optionally subsampled by 2,
/// with `ℓ = 0` the low-pass.
#[derive(Debug, Clone)]
pub struct BankPlan {
    bank: FilterBank,
    height: usize,
    width: usize,
    subsample: bool,
    fft: Option<(Fft2, Vec<Vec<Complex64>>)>,
}

impl BankPlan {
    pub fn new(bank: FilterBank, height: usize, width: usize, subsample: bool) -> Result<Self> {
        let n = bank.grid();
        if n > height || n > width {
            return Err(Error::size(format!("{n}×{n} filters do not fit a {height}×{width} map")));
        }
        Self::build(bank, height, width, subsample, n * n > FFT_AREA_THRESHOLD)
    }

    /// Like [`new`](Self::new), but filters larger than the map are wrapped
    /// around it (their taps summed modulo the map size), which is the exact
    /// circular convolution with the full filter. Always uses the FFT path.
    pub fn periodized(bank: FilterBank, height: usize, width: usize, subsample: bool) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::size("empty map"));
        }
        Self::build(bank, height, width, subsample, true)
    }

    fn build(bank: FilterBank, height: usize, width: usize, subsample: bool, use_fft: bool) -> Result<Self> {
        if subsample && (!height.is_multiple_of(2) || !width.is_multiple_of(2)) {
            return Err(Error::size(format!("cannot subsample a {height}×{width} map by 2")));
        }
        let fft = use_fft.then(|| {
            let fft = Fft2::new(height, width);
            let spectra = bank.filters().map(|f| filter_spectrum(f, &fft)).collect();
            (fft, spectra)
        });
        Ok(BankPlan { bank, height, width, subsample, fft })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn subsamples(&self) -> bool {
        self.subsample
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn output_size(&self) -> (usize, usize) {
        if self.subsample {
            (self.height / 2, self.width / 2)
        } else {
            (self.height, self.width)
        }
    }

    pub fn output_channels(&self, input_channels: usize) -> usize {
        input_channels * self.bank.width()
    }

    fn check_input(&self, x: &ComplexFeatureMap) -> Result<()> {
        if (x.height(), x.width()) != (self.height, self.width) {
            return Err(Error::shape(format!(
                "bank planned for {}×{}, got a {}×{} map",
                self.height,
                self.width,
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
        self.check_input(x)?;
        let nf = self.bank.width();
        let (oh, ow) = self.output_size();
        let mut out = ComplexFeatureMap::zeros(x.channels() * nf, oh, ow);
        let plane = self.height * self.width;
        let mut full = vec![Complex64::default(); plane];
        let mut spectrum = vec![Complex64::default(); plane];
        for c in 0..x.channels() {
            if let Some((fft, _)) = &self.fft {
                spectrum.copy_from_slice(x.channel(c));
                fft.forward(&mut spectrum);
            }
            for (l, filter) in self.bank.filters().enumerate() {
                match &self.fft {
                    Some((fft, spectra)) => {
                        for ((d, s), k) in full.iter_mut().zip(&spectrum).zip(&spectra[l]) {
                            *d = s * k;
                        }
                        fft.inverse(&mut full);
                    }
                    None => {
                        full.fill(Complex64::default());
                        direct_plane(x.channel(c), &mut full, self.height, self.width, filter, false);
                    }
                }
                self.store(&full, out.channel_mut(c * nf + l));
            }
        }
        Ok(out)
    }

    /// The adjoint of [`apply`](Self::apply) under `Re⟨·,·⟩`: zero-filling
    /// upsampling followed by correlation with the conjugated filters, summed
    /// over the bank.
    pub fn adjoint(&self, g: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
        let nf = self.bank.width();
        let (oh, ow) = self.output_size();
        if !g.channels().is_multiple_of(nf) || (g.height(), g.width()) != (oh, ow) {
            return Err(Error::shape(format!(
                "adjoint input {:?} does not match bank output ({}k)×{oh}×{ow}",
                g.shape(),
                nf
            )));
        }
        let channels = g.channels() / nf;
        let plane = self.height * self.width;
        let mut out = ComplexFeatureMap::zeros(channels, self.height, self.width);
        let mut up = vec![Complex64::default(); plane];
        let mut acc = vec![Complex64::default(); plane];
        for c in 0..channels {
            acc.fill(Complex64::default());
            for (l, filter) in self.bank.filters().enumerate() {
                self.load(g.channel(c * nf + l), &mut up);
                match &self.fft {
                    Some((fft, spectra)) => {
                        fft.forward(&mut up);
                        for ((a, u), k) in acc.iter_mut().zip(&up).zip(&spectra[l]) {
                            *a += u * k.conj();
                        }
                    }
                    None => direct_plane(&up, &mut acc, self.height, self.width, filter, true),
                }
            }
            if let Some((fft, _)) = &self.fft {
                fft.inverse(&mut acc);
            }
            out.channel_mut(c).copy_from_slice(&acc);
        }
        Ok(out)
    }

    fn store(&self, full: &[Complex64], dst: &mut [Complex64]) {
        if self.subsample {
            let ow = self.width / 2;
            for (r, row) in dst.chunks_mut(ow).enumerate() {
                for (col, d) in row.iter_mut().enumerate() {
                    *d = full[2 * r * self.width + 2 * col];
                }
            }
        } else {
            dst.copy_from_slice(full);
        }
    }

    fn load(&self, src: &[Complex64], up: &mut [Complex64]) {
        if self.subsample {
            up.fill(Complex64::default());
            upsample2_adjoint(src, up, self.width);
        } else {
            up.copy_from_slice(src);
        }
    }
}

/// Adjoint of keeping even samples: scatter `src` onto the even sites of a
/// plane `width` columns wide.
pub fn upsample2_adjoint(src: &[Complex64], dst: &mut [Complex64], width: usize) {
    let ow = width / 2;
    for (i, &v) in src.iter().enumerate() {
        let (r, c) = (i / ow, i % ow);
        dst[2 * r * width + 2 * c] = v;
    }
}

/// Applies `W` once; see [`BankPlan`].
pub fn apply_bank(x: &ComplexFeatureMap, bank: &FilterBank, subsample: bool) -> Result<ComplexFeatureMap> {
    BankPlan::new(bank.clone(), x.height(), x.width(), subsample)?.apply(x)
}

/// Adjoint of [`apply_bank`] for an input of `input_size`.
pub fn adjoint_bank(
    g: &ComplexFeatureMap,
    bank: &FilterBank,
    input_size: (usize, usize),
    subsample: bool,
) -> Result<ComplexFeatureMap> {
    BankPlan::new(bank.clone(), input_size.0, input_size.1, subsample)?.adjoint(g)
}
