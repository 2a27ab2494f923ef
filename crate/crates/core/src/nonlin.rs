//! Pointwise nonlinearities on complex coefficients.
//!
//! The modulus collapses the phase and keeps the amplitude. The amplitude
//! reductions keep the phase and shrink the amplitude:
//! `ρ(z) = e^{iφ(z)} ρ(|z|)`. This module also has the real-filter
//! constructions that recover `|x ∗ ψ|` from ReLUs of phase-shifted real
//! filters.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::filterbank::Filter;
use crate::tensor_ops::{conv2d_periodic, ComplexFeatureMap, RealImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NonlinKind {
    Modulus,
    SoftThreshold,
    Tanh,
    Sigmoid,
    Sign,
    Identity,
}

impl NonlinKind {
    pub const ALL: [NonlinKind; 6] = [
        NonlinKind::Modulus,
        NonlinKind::SoftThreshold,
        NonlinKind::Tanh,
        NonlinKind::Sigmoid,
        NonlinKind::Sign,
        NonlinKind::Identity,
    ];

    /// Whether the kind learns a per-channel `b`.
    pub fn has_offset(self) -> bool {
        matches!(self, NonlinKind::SoftThreshold | NonlinKind::Sigmoid)
    }

    /// Whether the kind learns a per-channel slope `a`.
    pub fn has_slope(self) -> bool {
        self == NonlinKind::Sigmoid
    }

    pub fn name(self) -> &'static str {
        match self {
            NonlinKind::Modulus => "modulus",
            NonlinKind::SoftThreshold => "thresh",
            NonlinKind::Tanh => "tanh",
            NonlinKind::Sigmoid => "sigmoid",
            NonlinKind::Sign => "sign",
            NonlinKind::Identity => "identity",
        }
    }
}

impl fmt::Display for NonlinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NonlinKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "modulus" | "mod" => NonlinKind::Modulus,
            "thresh" | "soft_threshold" | "athresh" => NonlinKind::SoftThreshold,
            "tanh" | "atanh" => NonlinKind::Tanh,
            "sigmoid" | "asigmoid" => NonlinKind::Sigmoid,
            "sign" | "asign" => NonlinKind::Sign,
            "identity" => NonlinKind::Identity,
            other => return Err(Error::param(format!("unknown nonlinearity {other:?}"))),
        })
    }
}

/// Initial soft-threshold.
pub const INIT_THRESHOLD: f64 = 0.1;

/// A nonlinearity with its per-channel learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinSpec {
    pub kind: NonlinKind,
    /// Threshold (soft-threshold) or offset (sigmoid), one per channel.
    pub b: Vec<f64>,
    /// Sigmoid slope, one per channel.
    pub a: Vec<f64>,
}

impl NonlinSpec {
    pub fn new(kind: NonlinKind, channels: usize) -> Self {
        let b = match kind {
            NonlinKind::SoftThreshold => vec![INIT_THRESHOLD; channels],
            NonlinKind::Sigmoid => vec![0.0; channels],
            _ => Vec::new(),
        };
        let a = if kind.has_slope() { vec![1.0; channels] } else { Vec::new() };
        NonlinSpec { kind, b, a }
    }

    pub fn modulus() -> Self {
        NonlinSpec::new(NonlinKind::Modulus, 0)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kind.has_offset() && self.b.len() != channels {
            return Err(Error::shape(format!("{} offsets for {channels} channels", self.b.len())));
        }
        if self.kind.has_slope() && self.a.len() != channels {
            return Err(Error::shape(format!("{} slopes for {channels} channels", self.a.len())));
        }
        if self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::param("non-finite nonlinearity parameters"));
        }
        if self.kind == NonlinKind::SoftThreshold && self.b.iter().any(|&b| b < 0.0) {
            return Err(Error::param("soft thresholds must be nonnegative"));
        }
        Ok(())
    }

    /// Thresholds are kept nonnegative after each optimizer step.
    pub fn project(&mut self) {
        if self.kind == NonlinKind::SoftThreshold {
            for b in &mut self.b {
                *b = b.max(0.0);
            }
        }
    }

    fn params(&self, channel: usize) -> (f64, f64) {
        (
            self.a.get(channel).copied().unwrap_or(1.0),
            self.b.get(channel).copied().unwrap_or(0.0),
        )
    }

    pub fn eval(&self, z: Complex64, channel: usize) -> Complex64 {
        let (a, b) = self.params(channel);
        match self.kind {
            NonlinKind::Modulus => modulus(z),
            NonlinKind::SoftThreshold => soft_threshold(z, b),
            NonlinKind::Tanh => amplitude_tanh(z),
            NonlinKind::Sigmoid => amplitude_sigmoid(z, a, b),
            NonlinKind::Sign => amplitude_sign(z),
            NonlinKind::Identity => z,
        }
    }

    /// Applies the nonlinearity to every channel of a map.
    pub fn apply(&self, x: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
        self.validate(x.channels())?;
        let mut out = x.clone();
        for c in 0..x.channels() {
            for z in out.channel_mut(c) {
                *z = self.eval(*z, c);
            }
        }
        Ok(out)
    }

    /// Reverse-mode step for one sample: given the input `z` and the gradient
    /// `g = ∂L/∂Re(out) + i ∂L/∂Im(out)`, returns the input gradient and the
    /// gradients for `(a, b)`.
    pub fn backward(&self, z: Complex64, g: Complex64, channel: usize) -> PointGrad {
        let (a, b) = self.params(channel);
        let r = z.norm();
        let zero = PointGrad::default();
        match self.kind {
            NonlinKind::Identity => PointGrad { input: g, ..zero },
            NonlinKind::Modulus => {
                if r == 0.0 {
                    zero
                } else {
                    PointGrad { input: z / r * g.re, ..zero }
                }
            }
            NonlinKind::SoftThreshold => {
                if r <= b {
                    return zero;
                }
                let unit = z / r;
                let radial = (g.conj() * unit).re;
                // f(r) = r − b, f' = 1, h = f/r
                let input = radial_grad(g, unit, radial, 1.0, (r - b) / r);
                PointGrad { input, a: 0.0, b: -radial }
            }
            NonlinKind::Tanh => {
                if r == 0.0 {
                    return PointGrad { input: g, ..zero };
                }
                let t = r.tanh();
                let unit = z / r;
                let radial = (g.conj() * unit).re;
                PointGrad { input: radial_grad(g, unit, radial, 1.0 - t * t, t / r), ..zero }
            }
            NonlinKind::Sign => {
                if r == 0.0 {
                    return PointGrad { input: g, ..zero };
                }
                let unit = z / r;
                let radial = (g.conj() * unit).re;
                let d = 1.0 + r;
                PointGrad { input: radial_grad(g, unit, radial, 1.0 / (d * d), 1.0 / d), ..zero }
            }
            NonlinKind::Sigmoid => {
                if r == 0.0 {
                    return zero;
                }
                let f = sigmoid_amplitude(r, a, b);
                if f == 0.0 {
                    return zero;
                }
                let unit = z / r;
                let radial = (g.conj() * unit).re;
                let df = f * (1.0 - f);
                let input = radial_grad(g, unit, radial, df * a / r, f / r);
                PointGrad { input, a: radial * df * r.ln(), b: radial * df }
            }
        }
    }
}

/// Gradient through `out = h(r)·z` with `f(r) = r·h(r)`:
/// `h·g + (f′ − h)·Re(conj(g)·ẑ)·ẑ`.
fn radial_grad(g: Complex64, unit: Complex64, radial: f64, fprime: f64, h: f64) -> Complex64 {
    g * h + unit * ((fprime - h) * radial)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointGrad {
    pub input: Complex64,
    pub a: f64,
    pub b: f64,
}

pub fn modulus(z: Complex64) -> Complex64 {
    Complex64::new(z.norm(), 0.0)
}

/// `ReLU(|z| − b)·e^{iφ(z)}`.
pub fn soft_threshold(z: Complex64, b: f64) -> Complex64 {
    let r = z.norm();
    if r <= b {
        Complex64::default()
    } else {
        z * ((r - b) / r)
    }
}

fn with_amplitude(z: Complex64, amplitude: impl FnOnce(f64) -> f64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        Complex64::default()
    } else {
        z * (amplitude(r) / r)
    }
}

pub fn amplitude_tanh(z: Complex64) -> Complex64 {
    with_amplitude(z, f64::tanh)
}

/// `(1 + e^{−a·log r − b})^{−1}` as a function of `r > 0`.
fn sigmoid_amplitude(r: f64, a: f64, b: f64) -> f64 {
    let t = a * r.ln() + b;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Amplitude sigmoid; `0` maps to `0`.
pub fn amplitude_sigmoid(z: Complex64, a: f64, b: f64) -> Complex64 {
    with_amplitude(z, |r| sigmoid_amplitude(r, a, b))
}

pub fn amplitude_sign(z: Complex64) -> Complex64 {
    with_amplitude(z, |r| r / (1.0 + r))
}

fn check_single_channel(x: &RealImage) -> Result<()> {
    if x.channels() != 1 {
        return Err(Error::shape("phase filters act on single-channel images"));
    }
    Ok(())
}

/// `ReLU(x ∗ Re(e^{−iα} ψ))` for a real single-channel image.
pub fn relu_phase_filter(x: &RealImage, f: &Filter, alpha: f64) -> Result<Vec<f64>> {
    check_single_channel(x)?;
    let xc = ComplexFeatureMap::from_real(x);
    let y = conv2d_periodic(&xc, &f.real_phase(alpha))?;
    Ok(y.data().iter().map(|z| z.re.max(0.0)).collect())
}

/// As [`relu_phase_filter`] for a complex map whose samples must all be real.
pub fn relu_phase_filter_map(x: &ComplexFeatureMap, f: &Filter, alpha: f64) -> Result<Vec<f64>> {
    if x.data().iter().any(|z| z.im != 0.0) {
        return Err(Error::Domain("phase filters take a real input".into()));
    }
    let pixels = x.data().iter().map(|z| z.re).collect();
    relu_phase_filter(&RealImage::new(1, x.height(), x.width(), pixels)?, f, alpha)
}

/// How the phase integral is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSum {
    /// `(π/n)·Σ_k ReLU(x ∗ ψ_{α_k})` with `α_k = −π + 2πk/n`.
    Quadrature(usize),
    /// Sum over `α ∈ {−π/2, 0, π/2, π}`, i.e. `|Re z| + |Im z|`.
    FourPhase,
}

/// Reconstructs `|x ∗ ψ|` from ReLUs of real phase-shifted filters.
pub fn modulus_from_relus(x: &RealImage, f: &Filter, mode: PhaseSum) -> Result<Vec<f64>> {
    check_single_channel(x)?;
    let (alphas, weight): (Vec<f64>, f64) = match mode {
        PhaseSum::Quadrature(n) => {
            if n < 2 {
                return Err(Error::param(format!("need at least 2 phases, got {n}")));
            }
            ((0..n).map(|k| -PI + 2.0 * PI * k as f64 / n as f64).collect(), PI / n as f64)
        }
        PhaseSum::FourPhase => (vec![-PI / 2.0, 0.0, PI / 2.0, PI], 1.0),
    };
    // x ∗ Re(e^{−iα}ψ) = Re(e^{−iα}(x ∗ ψ)) for real x: one complex convolution
    // serves every phase.
    let z = conv2d_periodic(&ComplexFeatureMap::from_real(x), f)?;
    let rotations: Vec<Complex64> = alphas.iter().map(|&a| Complex64::from_polar(1.0, -a)).collect();
    Ok(z
        .data()
        .iter()
        .map(|&v| weight * rotations.iter().map(|r| (r * v).re.max(0.0)).sum::<f64>())
        .collect())
}
