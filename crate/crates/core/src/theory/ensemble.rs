use std::f64::consts::{E, PI};

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::filterbank::{build_morlet, MorletParams, DEFAULT_GRID};
use crate::nonlin::soft_threshold;
use crate::rng::{self, Rng};
use crate::tensor_ops::{conv2d_periodic, ComplexFeatureMap};

/// Samples are drawn in chunks of this many vectors, each from its own stream.
const CHUNK: usize = 4096;
/// Side of the synthetic images behind [`EnsembleKind::ImagePatches`].
const PATCH_IMAGE: usize = 64;

/// Distribution of the amplitudes of a uniform-phase vector.
#[derive(Debug, Clone, PartialEq)]
pub enum AmplitudeLaw {
    /// The same amplitudes for every sample.
    Fixed(Vec<f64>),
    /// i.i.d. amplitudes of `ρ_b(Z)` with `Z` standard complex Gaussian.
    SoftThresholdedGaussian { b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleKind {
    /// Independent coordinates with `E|X_k|² = scales[k]²`.
    ComplexGaussian { scales: Vec<f64> },
    /// Independent uniform phases with amplitudes drawn independently of them.
    UniformPhase(AmplitudeLaw),
    /// Runs of `d` horizontally adjacent Morlet coefficients of random images
    /// with a `1/|ω|` amplitude spectrum.
    ImagePatches,
}

/// A reproducible source of random vectors in `ℂ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnsemble {
    pub kind: EnsembleKind,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticEnsemble {
    pub fn complex_gaussian(scales: Vec<f64>, seed: u64) -> Self {
        SyntheticEnsemble { dim: scales.len(), kind: EnsembleKind::ComplexGaussian { scales }, seed }
    }

    pub fn isotropic_gaussian(dim: usize, scale: f64, seed: u64) -> Self {
        Self::complex_gaussian(vec![scale; dim], seed)
    }

    pub fn uniform_phase(dim: usize, law: AmplitudeLaw, seed: u64) -> Self {
        SyntheticEnsemble { kind: EnsembleKind::UniformPhase(law), dim, seed }
    }

    pub fn image_patches(dim: usize, seed: u64) -> Self {
        SyntheticEnsemble { kind: EnsembleKind::ImagePatches, dim, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::param("ensemble dimension must be at least 1"));
        }
        match &self.kind {
            EnsembleKind::ComplexGaussian { scales } => {
                if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::param("Gaussian scales must be positive and finite"));
                }
            }
            EnsembleKind::UniformPhase(AmplitudeLaw::Fixed(a)) => {
                if a.len() != self.dim || a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::param(format!("need {} non-negative amplitudes", self.dim)));
                }
            }
            EnsembleKind::UniformPhase(AmplitudeLaw::SoftThresholdedGaussian { b }) => {
                if !(b.is_finite() && *b >= 0.0) {
                    return Err(Error::param(format!("threshold must be non-negative, got {b}")));
                }
            }
            EnsembleKind::ImagePatches => {
                if self.dim > PATCH_IMAGE {
                    return Err(Error::param(format!("patches are at most {PATCH_IMAGE} wide")));
                }
            }
        }
        Ok(())
    }

    /// Differential entropy of `X` as a vector of `ℝ^{2d}`, in nats, when known
    /// in closed form.
    pub fn entropy(&self) -> Option<f64> {
        match &self.kind {
            EnsembleKind::ComplexGaussian { scales } => {
                Some(scales.iter().map(|s| (PI * E * s * s).ln()).sum())
            }
            _ => None,
        }
    }

    /// The same ensemble with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let kind = match &self.kind {
            EnsembleKind::ComplexGaussian { scales } => {
                EnsembleKind::ComplexGaussian { scales: scales.iter().map(|s| s * factor).collect() }
            }
            EnsembleKind::UniformPhase(AmplitudeLaw::Fixed(a)) => {
                EnsembleKind::UniformPhase(AmplitudeLaw::Fixed(a.iter().map(|v| v * factor).collect()))
            }
            _ => return Err(Error::param("only Gaussian and fixed-amplitude ensembles scale in closed form")),
        };
        Ok(SyntheticEnsemble { kind, ..self.clone() })
    }

    /// `n` samples as an `n × d` row-major array. `stream` selects an
    /// independent draw of the same ensemble.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Vec<Complex64>> {
        self.validate()?;
        let d = self.dim;
        let chunks: Vec<Vec<Complex64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = CHUNK.min(n - c * CHUNK);
                let mut rng = rng::stream(self.seed, "ensemble", (stream << 32) | c as u64);
                self.sample_chunk(rows, &mut rng)
            })
            .collect::<Result<_>>()?;
        let out = chunks.concat();
        debug_assert_eq!(out.len(), n * d);
        Ok(out)
    }

    fn sample_chunk(&self, rows: usize, rng: &mut Rng) -> Result<Vec<Complex64>> {
        let d = self.dim;
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        match &self.kind {
            EnsembleKind::ComplexGaussian { scales } => Ok((0..rows * d)
                .map(|i| Complex64::new(normal(), normal()) * (scales[i % d] * std::f64::consts::FRAC_1_SQRT_2))
                .collect()),
            EnsembleKind::UniformPhase(law) => Ok((0..rows * d)
                .map(|i| {
                    let amp = match law {
                        AmplitudeLaw::Fixed(a) => a[i % d],
                        AmplitudeLaw::SoftThresholdedGaussian { b } => {
                            let z = Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                                * std::f64::consts::FRAC_1_SQRT_2;
                            soft_threshold(z, *b).norm()
                        }
                    };
                    Complex64::from_polar(amp, rng.random_range(0.0..2.0 * PI))
                })
                .collect()),
            EnsembleKind::ImagePatches => {
                let coeffs = pink_noise_coefficients(rng)?;
                let n = PATCH_IMAGE;
                Ok((0..rows)
                    .flat_map(|p| {
                        let (r, c) = ((p / n) % n, p % n);
                        (0..d).map(|k| coeffs[r * n + (c + k) % n]).collect::<Vec<_>>()
                    })
                    .collect())
            }
        }
    }
}

/// First-layer Morlet coefficients of a random image with `1/|ω|` amplitude spectrum.
fn pink_noise_coefficients(rng: &mut Rng) -> Result<Vec<Complex64>> {
    let n = PATCH_IMAGE;
    let fft = Fft2::new(n, n);
    let mut spec: Vec<Complex64> = (0..n * n)
        .map(|i| {
            let k1 = (i / n) as f64;
            let k2 = (i % n) as f64;
            let f1 = k1.min(n as f64 - k1);
            let f2 = k2.min(n as f64 - k2);
            let radius = (f1 * f1 + f2 * f2).sqrt();
            let gain = if radius == 0.0 { 0.0 } else { 1.0 / radius };
            Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * gain
        })
        .collect();
    fft.inverse(&mut spec);
    let image: Vec<Complex64> = spec.iter().map(|z| Complex64::new(z.re, 0.0)).collect();
    let x = ComplexFeatureMap::from_vec(1, n, n, image)?;
    let psi = build_morlet(MorletParams::first_layer(0.0), DEFAULT_GRID)?;
    Ok(conv2d_periodic(&x, &psi)?.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_stream_dependent() {
        let e = SyntheticEnsemble::isotropic_gaussian(3, 1.0, 5);
        let a = e.sample(5000, 0).unwrap();
        assert_eq!(a, e.sample(5000, 0).unwrap());
        assert_ne!(a, e.sample(5000, 1).unwrap());
        assert_eq!(a.len(), 15000);
        let p = SyntheticEnsemble::image_patches(4, 1);
        assert_eq!(p.sample(100, 0).unwrap(), p.sample(100, 0).unwrap());
        assert!(SyntheticEnsemble::isotropic_gaussian(0, 1.0, 0).sample(1, 0).is_err());
    }

    #[test]
    fn gaussian_second_moments_match_scales() {
        let e = SyntheticEnsemble::complex_gaussian(vec![1.0, 3.0], 2);
        let n = 40_000;
        let x = e.sample(n, 0).unwrap();
        for (k, s) in [1.0f64, 3.0].iter().enumerate() {
            let m = (0..n).map(|i| x[i * 2 + k].norm_sqr()).sum::<f64>() / n as f64;
            assert!((m / (s * s) - 1.0).abs() < 0.03, "{m}");
        }
        let h = e.entropy().unwrap();
        let h2 = e.scaled(2.0).unwrap().entropy().unwrap();
        assert!((h2 - h - 2.0 * 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_phase_amplitudes() {
        let e = SyntheticEnsemble::uniform_phase(2, AmplitudeLaw::Fixed(vec![1.0, 2.0]), 0);
        let x = e.sample(100, 0).unwrap();
        assert!(x.chunks(2).all(|v| (v[0].norm() - 1.0).abs() < 1e-12 && (v[1].norm() - 2.0).abs() < 1e-12));
        let s = SyntheticEnsemble::uniform_phase(3, AmplitudeLaw::SoftThresholdedGaussian { b: 0.5 }, 0);
        let x = s.sample(20_000, 0).unwrap();
        // P(|Z| ≤ b) = 1 − e^{−b²} for E|Z|² = 1.
        let zeros = x.iter().filter(|z| z.norm() == 0.0).count() as f64 / x.len() as f64;
        assert!((zeros - (1.0 - (-0.25f64).exp())).abs() < 0.01, "{zeros}");
        assert!(SyntheticEnsemble::uniform_phase(2, AmplitudeLaw::Fixed(vec![1.0]), 0).validate().is_err());
    }
}
