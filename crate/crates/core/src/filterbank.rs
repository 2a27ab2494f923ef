//! Elongated Morlet band-pass filters, the Gaussian low-pass window, and the
//! spectral statistics (center frequency and bandwidth) of a filter.
//!
//! Coordinates are `u = (row, col)` offsets from the grid center. A band-pass
//! filter at angle `θ` is the mother wavelet evaluated at rotated coordinates,
//! `g_θ(u) = g(r_{-θ} u)`, and the mother wavelet is
//!
//! ```text
//! g(u) = σ² s² / (2π) · (e^{iξ·u} − K) · e^{−u·Σu/2},   Σ = diag(σ², σ² s²)
//! ```
//!
//! with `K` the exact ratio that makes the discrete sum of taps vanish.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft2;

/// Default filter grid for 32×32 inputs.
pub const DEFAULT_GRID: usize = 15;

/// Parameters of one elongated Morlet filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorletParams {
    /// Scale exponent; the filter scale is `2^gamma`.
    pub gamma: f64,
    /// Center frequency before rotation, radians/pixel.
    pub xi: [f64; 2],
    /// Bandwidth, radians/pixel.
    pub sigma: f64,
    /// Anisotropy of the envelope.
    pub slant: f64,
    /// Rotation angle θ, in `[0, π]`.
    pub angle: f64,
}

impl MorletParams {
    /// Band-pass parameters of the first layer of a block at scale `2^gamma`.
    pub fn first_layer(gamma: f64) -> Self {
        let scale = 2f64.powf(-gamma);
        MorletParams {
            gamma,
            xi: [0.75 * PI * scale, 0.0],
            sigma: 1.25 * scale,
            slant: 0.5,
            angle: 0.0,
        }
    }

    /// Band-pass parameters of the second (intermediate-scale) layer of a block.
    pub fn second_layer() -> Self {
        MorletParams {
            gamma: 0.0,
            xi: [PI / SQRT_2, 0.0],
            sigma: 1.25 * (2.0f64 / 3.0).sqrt(),
            slant: 0.2f64.sqrt(),
            angle: 0.0,
        }
    }

    pub fn rotated(self, angle: f64) -> Self {
        MorletParams { angle, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.xi[0], self.xi[1], self.sigma, self.slant, self.angle];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite Morlet parameters {self:?}")));
        }
        if self.sigma <= 0.0 || self.slant <= 0.0 {
            return Err(Error::param("sigma and slant must be positive"));
        }
        if !(0.0..=PI).contains(&self.angle) {
            return Err(Error::param(format!("angle {} outside [0, π]", self.angle)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    BandPass(MorletParams),
    LowPass { sigma: f64 },
    /// Taps supplied directly (test filters, Diracs).
    Custom,
}

/// A complex filter sampled on an odd `size × size` grid centered at `u = 0`.
///
/// `taps[r * size + c]` holds the value at offset `(r − size/2, c − size/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    size: usize,
    taps: Vec<Complex64>,
    kind: FilterKind,
}

impl Filter {
    pub fn from_taps(size: usize, taps: Vec<Complex64>) -> Result<Self> {
        check_grid(size)?;
        if taps.len() != size * size {
            return Err(Error::shape(format!(
                "{} taps for a {size}×{size} grid",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::param("non-finite filter taps"));
        }
        Ok(Filter { size, taps, kind: FilterKind::Custom })
    }

    /// The unit impulse at `u = 0`.
    pub fn dirac(size: usize) -> Result<Self> {
        check_grid(size)?;
        let mut taps = vec![Complex64::default(); size * size];
        taps[(size / 2) * size + size / 2] = Complex64::new(1.0, 0.0);
        Ok(Filter { size, taps, kind: FilterKind::Custom })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half(&self) -> usize {
        self.size / 2
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    /// Tap at offset `(du, dv)` from the center; both in `[-half, half]`.
    pub fn at(&self, du: isize, dv: isize) -> Complex64 {
        let h = self.half() as isize;
        self.taps[((du + h) as usize) * self.size + (dv + h) as usize]
    }

    pub fn sum(&self) -> Complex64 {
        self.taps.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.taps.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt()
    }

    /// The same filter scaled to unit ℓ² norm.
    pub fn normalized(&self) -> Result<Filter> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Degenerate("cannot normalize a zero filter".into()));
        }
        Ok(Filter {
            size: self.size,
            taps: self.taps.iter().map(|t| t / n).collect(),
            kind: self.kind,
        })
    }

    /// `Re(e^{-iα} ψ)` as a complex filter with zero imaginary part.
    pub fn real_phase(&self, alpha: f64) -> Filter {
        let rot = Complex64::from_polar(1.0, -alpha);
        Filter {
            size: self.size,
            taps: self.taps.iter().map(|t| Complex64::new((rot * t).re, 0.0)).collect(),
            kind: FilterKind::Custom,
        }
    }

    /// Re-centers this filter's taps on a larger odd grid, zero-padded.
    pub fn padded(&self, size: usize) -> Result<Filter> {
        check_grid(size)?;
        if size < self.size {
            return Err(Error::size(format!("cannot pad {} taps into {size}", self.size)));
        }
        let off = (size - self.size) / 2;
        let mut taps = vec![Complex64::default(); size * size];
        for r in 0..self.size {
            for c in 0..self.size {
                taps[(r + off) * size + c + off] = self.taps[r * self.size + c];
            }
        }
        Ok(Filter { size, taps, kind: self.kind })
    }
}

fn check_grid(n: usize) -> Result<()> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::Grid(format!("grid size {n} must be odd")));
    }
    Ok(())
}

/// Grid size for a filter of bandwidth `sigma`: large enough that the
/// Gaussian envelope has decayed below 1e-4 at the border.
pub fn grid_for(sigma: f64) -> usize {
    2 * (4.0 / sigma).ceil() as usize + 1
}

/// `(cos θ, sin θ)`, exact at multiples of π/2 so that quarter-turn rotations
/// reproduce taps bit for bit.
fn cos_sin(theta: f64) -> (f64, f64) {
    let quarters = theta / (PI / 2.0);
    if (quarters - quarters.round()).abs() < 1e-12 {
        match (quarters.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        (theta.cos(), theta.sin())
    }
}

/// Samples a rotated elongated Morlet wavelet on an odd `grid × grid` lattice.
///
/// Angles are split into whole quarter turns and a residual in `[0, π/2)`:
/// the residual is applied to the coordinates before sampling, the quarter
/// turns by permuting taps, so filters a quarter turn apart agree bit for bit.
pub fn build_morlet(params: MorletParams, grid: usize) -> Result<Filter> {
    check_grid(grid)?;
    params.validate()?;
    let quarters = (params.angle / (PI / 2.0) + 1e-12).floor();
    let residual = (params.angle - quarters * PI / 2.0).max(0.0);
    let base = sample_morlet(params, residual, grid);
    let mut filter = rotate_quarter(&base, quarters as i32);
    filter.kind = FilterKind::BandPass(params);
    Ok(filter)
}

fn sample_morlet(params: MorletParams, angle: f64, grid: usize) -> Filter {
    let h = (grid / 2) as isize;
    let (c, s) = cos_sin(angle);
    let sig2 = params.sigma * params.sigma;
    let slant2 = params.slant * params.slant;

    let mut wave = Vec::with_capacity(grid * grid);
    let mut envelope = Vec::with_capacity(grid * grid);
    for du in -h..=h {
        for dv in -h..=h {
            let (u1, u2) = (du as f64, dv as f64);
            // r_{-θ} u
            let v1 = c * u1 + s * u2;
            let v2 = -s * u1 + c * u2;
            let env = (-(sig2 * v1 * v1 + sig2 * slant2 * v2 * v2) / 2.0).exp();
            let phase = params.xi[0] * v1 + params.xi[1] * v2;
            wave.push(Complex64::from_polar(1.0, phase) * env);
            envelope.push(env);
        }
    }
    let k = wave.iter().sum::<Complex64>() / envelope.iter().sum::<f64>();
    let amplitude = sig2 * slant2 / (2.0 * PI);
    let taps = wave
        .iter()
        .zip(&envelope)
        .map(|(w, &e)| (w - k * e) * amplitude)
        .collect();
    Filter { size: grid, taps, kind: FilterKind::BandPass(params) }
}

/// Samples `σ²/(2π) · e^{−σ²|u|²/2}` on an odd `grid × grid` lattice.
pub fn build_gaussian_lowpass(sigma: f64, grid: usize) -> Result<Filter> {
    check_grid(grid)?;
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::param(format!("low-pass sigma {sigma} must be positive and finite")));
    }
    let h = (grid / 2) as isize;
    let amp = sigma * sigma / (2.0 * PI);
    let mut taps = Vec::with_capacity(grid * grid);
    for du in -h..=h {
        for dv in -h..=h {
            let r2 = (du * du + dv * dv) as f64;
            taps.push(Complex64::new(amp * (-sigma * sigma * r2 / 2.0).exp(), 0.0));
        }
    }
    Ok(Filter { size: grid, taps, kind: FilterKind::LowPass { sigma } })
}

/// Which layer of a two-layer block a bank serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockLayer {
    First,
    Second,
}

/// One low-pass filter and `L` band-pass filters at angles `πℓ/L`, `ℓ = 1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    low_pass: Filter,
    band_pass: Vec<Filter>,
    layer: BlockLayer,
    subsample: usize,
}

/// Low-pass bandwidth shared by both layers of a block (`γ = −1/2`).
pub fn block_lowpass_sigma() -> f64 {
    1.25 * SQRT_2
}

pub fn build_bank(angles: usize, layer: BlockLayer, grid: usize) -> Result<FilterBank> {
    if angles == 0 {
        return Err(Error::param("a filter bank needs at least one band-pass angle"));
    }
    let low_pass = build_gaussian_lowpass(block_lowpass_sigma(), grid)?;
    let mother = match layer {
        BlockLayer::First => MorletParams::first_layer(0.0),
        BlockLayer::Second => MorletParams::second_layer(),
    };
    let band_pass = (1..=angles)
        .map(|l| build_morlet(mother.rotated(PI * l as f64 / angles as f64), grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterBank { low_pass, band_pass, layer, subsample: 2 })
}

impl FilterBank {
    /// Assembles a bank from arbitrary filters sharing one grid size.
    pub fn from_filters(low_pass: Filter, band_pass: Vec<Filter>) -> Result<Self> {
        if band_pass.iter().any(|f| f.size() != low_pass.size()) {
            return Err(Error::shape("all filters of a bank must share one grid size"));
        }
        Ok(FilterBank { low_pass, band_pass, layer: BlockLayer::First, subsample: 2 })
    }

    pub fn low_pass(&self) -> &Filter {
        &self.low_pass
    }

    pub fn band_pass(&self) -> &[Filter] {
        &self.band_pass
    }

    pub fn angles(&self) -> usize {
        self.band_pass.len()
    }

    pub fn layer(&self) -> BlockLayer {
        self.layer
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn grid(&self) -> usize {
        self.low_pass.size()
    }

    /// Low-pass first, then band-pass filters in angle order.
    pub fn filters(&self) -> impl Iterator<Item = &Filter> {
        std::iter::once(&self.low_pass).chain(self.band_pass.iter())
    }

    /// Number of output channels per input channel, `L + 1`.
    pub fn width(&self) -> usize {
        self.band_pass.len() + 1
    }
}

/// Center frequency `ξ` and bandwidth `σ` of a unit-norm filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralStats {
    pub center_freq: [f64; 2],
    pub bandwidth: f64,
}

/// The fundamental domain of frequencies over which the moments are taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralWindow {
    /// `[−π, π)²`.
    Principal,
    /// The period cell centered on the peak of `|ψ̂|²`. Band-pass filters whose
    /// spectrum straddles ±π would otherwise have their mass split across the
    /// cell boundary.
    PeakCentered,
    /// The period cell centered on the given frequency.
    CenteredAt([f64; 2]),
}

fn wrap_angle(w: f64) -> f64 {
    (w + PI).rem_euclid(2.0 * PI) - PI
}

/// Spectral statistics over the peak-centered period cell.
pub fn spectral_stats(filter: &Filter) -> Result<SpectralStats> {
    spectral_stats_in(filter, SpectralWindow::PeakCentered)
}

/// Moments of `|ψ̂(ω)|²/(2π)²` for the normalized filter, evaluated by the
/// trapezoid rule on a zero-padded DFT grid.
///
/// `ψ̂` is 2π-periodic, so any period cell is a valid integration domain; the
/// translation bound holds for the moments of every cell. The returned center
/// frequency is wrapped into `[−π, π)`, which leaves `e^{−iξ·τ}` unchanged for
/// integer `τ`.
pub fn spectral_stats_in(filter: &Filter, window: SpectralWindow) -> Result<SpectralStats> {
    let psi = filter.normalized()?;
    let m = (4 * psi.size()).max(64).next_power_of_two();
    let power = padded_power_spectrum(&psi, m);

    let step = 2.0 * PI / m as f64;
    let freq = |k: usize| wrap_angle(step * k as f64);
    // Cell centers sit on the DFT grid so that the seam at ±π from the center
    // falls on a sample, where the trapezoid rule below handles the jump.
    let snap = |w: f64| wrap_angle((w / step).round() * step);
    let center = match window {
        SpectralWindow::Principal => [0.0, 0.0],
        SpectralWindow::CenteredAt(c) => [snap(c[0]), snap(c[1])],
        SpectralWindow::PeakCentered => {
            let (idx, _) = power
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
            [freq(idx / m), freq(idx % m)]
        }
    };

    // Offsets t = ω − c in [−π, π). At t = −π the first-moment integrand jumps
    // from −π to +π across the periodic seam; the trapezoid rule takes the mean, 0.
    let offsets = |c: f64| -> Vec<(f64, f64)> {
        (0..m)
            .map(|k| {
                let t = wrap_angle(2.0 * PI * k as f64 / m as f64 - c);
                let first = if (t + PI).abs() < 1e-12 { 0.0 } else { t };
                (first, t * t)
            })
            .collect()
    };
    let rows = offsets(center[0]);
    let cols = offsets(center[1]);

    let total: f64 = power.iter().sum();
    let (mut m1, mut m2, mut second) = (0.0, 0.0, 0.0);
    for (r, &(t1, s1)) in rows.iter().enumerate() {
        for (c, &(t2, s2)) in cols.iter().enumerate() {
            let p = power[r * m + c] / total;
            m1 += t1 * p;
            m2 += t2 * p;
            second += (s1 + s2) * p;
        }
    }
    let variance = (second - m1 * m1 - m2 * m2).max(0.0);
    Ok(SpectralStats {
        center_freq: [wrap_angle(center[0] + m1), wrap_angle(center[1] + m2)],
        bandwidth: variance.sqrt(),
    })
}

/// `|ψ̂(2πk/m)|²` on an `m × m` grid, taps placed periodically around the origin.
fn padded_power_spectrum(filter: &Filter, m: usize) -> Vec<f64> {
    let h = filter.half() as isize;
    let mut buf = vec![Complex64::default(); m * m];
    for du in -h..=h {
        for dv in -h..=h {
            let r = du.rem_euclid(m as isize) as usize;
            let c = dv.rem_euclid(m as isize) as usize;
            buf[r * m + c] += filter.at(du, dv);
        }
    }
    Fft2::new(m, m).forward(&mut buf);
    buf.iter().map(|z| z.norm_sqr()).collect()
}

/// Rotates the tap grid by a multiple of a quarter turn: the returned filter
/// satisfies `out(u) = f(r_{-quarters·π/2} u)`.
pub fn rotate_quarter(filter: &Filter, quarters: i32) -> Filter {
    let h = filter.half() as isize;
    let n = filter.size();
    let (c, s) = cos_sin(quarters as f64 * PI / 2.0);
    let (c, s) = (c as isize, s as isize);
    let mut taps = vec![Complex64::default(); n * n];
    for du in -h..=h {
        for dv in -h..=h {
            let v1 = c * du + s * dv;
            let v2 = -s * du + c * dv;
            taps[((du + h) as usize) * n + (dv + h) as usize] = filter.at(v1, v2);
        }
    }
    Filter { size: n, taps, kind: FilterKind::Custom }
}
