use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::TheoremReport;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::filterbank::{spectral_stats, Filter};
use crate::nonlin::{modulus_from_relus, soft_threshold, PhaseSum};
use crate::rng;
use crate::tensor_ops::{conv2d_periodic, translate, ComplexFeatureMap, RealImage};

/// Relative tolerance of the Fourier shift identity.
pub const FOURIER_TOL: f64 = 1e-10;
/// Absolute tolerance of the translation bound for unit-norm inputs.
pub const TRANSLATION_TOL: f64 = 1e-9;
/// Tolerance of the four-phase sandwich, relative to the largest response.
pub const SANDWICH_TOL: f64 = 1e-10;
/// Distance allowed between the searched minimizer and soft thresholding.
pub const PROX_TOL: f64 = 1e-4;
/// Objective gap beyond which a grid point counts as beating soft thresholding.
const PROX_OBJECTIVE_TOL: f64 = 1e-8;
/// Relative ℓ∞ tolerance of the ReLU phase quadrature.
const QUADRATURE_TOL: f64 = 1e-3;

/// `e^{−2πi(k·t mod n)/n}` with the product reduced in integers.
fn twiddle(k: usize, t: isize, n: usize) -> f64 {
    -2.0 * PI * ((k as i128 * t as i128).rem_euclid(n as i128)) as f64 / n as f64
}

/// Compares `DFT(x_τ)(ω)` with `e^{−iω·τ} DFT(x)(ω)` at every frequency of
/// every channel. Trials count frequencies.
pub fn check_fourier_shift(x: &ComplexFeatureMap, tau: (isize, isize)) -> TheoremReport {
    let (h, w) = (x.height(), x.width());
    let fft = Fft2::new(h, w);
    let shifted = translate(x, tau);
    let mut worst_rel = 0.0f64;
    let mut violations = 0;
    for c in 0..x.channels() {
        let mut a = x.channel(c).to_vec();
        let mut b = shifted.channel(c).to_vec();
        fft.forward(&mut a);
        fft.forward(&mut b);
        let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for k1 in 0..h {
            for k2 in 0..w {
                let phase = Complex64::from_polar(1.0, twiddle(k1, tau.0, h) + twiddle(k2, tau.1, w));
                let i = k1 * w + k2;
                let rel = (b[i] - phase * a[i]).norm() / scale;
                worst_rel = worst_rel.max(rel);
                if rel > FOURIER_TOL {
                    violations += 1;
                }
            }
        }
    }
    TheoremReport::new("fourier-shift", x.data().len(), violations, FOURIER_TOL - worst_rel)
        .with("tau", format!("({}, {})", tau.0, tau.1))
        .with("max_rel_error", format!("{worst_rel:.3e}"))
}

fn random_complex_map(size: usize, rng: &mut rng::Rng) -> ComplexFeatureMap {
    ComplexFeatureMap::from_fn(1, size, size, |_, _, _| {
        Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
    })
}

fn random_shift(size: usize, rng: &mut rng::Rng) -> (isize, isize) {
    let s = size as i64;
    (rng.random_range(-s..s) as isize, rng.random_range(-s..s) as isize)
}

/// [`check_fourier_shift`] over random maps and shifts on a `size × size` grid.
pub fn check_fourier_shift_random(trials: usize, size: usize, seed: u64) -> Result<TheoremReport> {
    if size == 0 {
        return Err(Error::size("grid must be non-empty"));
    }
    let reports: Vec<TheoremReport> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "fourier", t as u64);
            let x = random_complex_map(size, &mut rng);
            let tau = random_shift(size, &mut rng);
            check_fourier_shift(&x, tau)
        })
        .collect();
    let violating = reports.iter().filter(|r| r.violations > 0).count();
    let worst = reports.iter().map(|r| r.worst_slack).fold(FOURIER_TOL, f64::min);
    Ok(TheoremReport::new("fourier-shift", trials, violating, worst)
        .with("size", size)
        .with("tolerance", FOURIER_TOL))
}

/// `‖x_τ ∗ ψ − e^{−iξ·τ}(x ∗ ψ)‖∞`, both convolutions evaluated directly.
pub fn translation_lhs(x: &ComplexFeatureMap, filter: &Filter, xi: [f64; 2], tau: (isize, isize)) -> Result<f64> {
    let plain = conv2d_periodic(x, filter)?;
    let moved = conv2d_periodic(&translate(x, tau), filter)?;
    let phase = Complex64::from_polar(1.0, -(xi[0] * tau.0 as f64 + xi[1] * tau.1 as f64));
    Ok(moved
        .data()
        .iter()
        .zip(plain.data())
        .map(|(m, p)| (m - phase * p).norm())
        .fold(0.0, f64::max))
}

/// Shifts of length 1, 2 and 4 along either axis.
const SHIFTS: [(isize, isize); 12] = [
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (2, 0), (-2, 0), (0, 2), (0, -2),
    (4, 0), (-4, 0), (0, 4), (0, -4),
];

/// Random unit-norm real images on a periodic `size × size` grid against the
/// bound `σ|τ|‖x‖₂`, with `ξ` and `σ` of the normalized filter.
pub fn check_translation_bound(filter: &Filter, trials: usize, size: usize, seed: u64) -> Result<TheoremReport> {
    let psi = filter.normalized()?;
    if psi.size() > size {
        return Err(Error::size(format!("{0}×{0} filter on a {size}×{size} grid", psi.size())));
    }
    let stats = spectral_stats(&psi)?;
    let sigma = stats.bandwidth;
    let outcomes: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "translation", t as u64);
            let mut x = ComplexFeatureMap::from_fn(1, size, size, |_, _, _| {
                Complex64::new(StandardNormal.sample(&mut rng), 0.0)
            });
            let norm = x.norm();
            x.data_mut().iter_mut().for_each(|v| *v /= norm);
            let tau = SHIFTS[rng.random_range(0..SHIFTS.len())];
            let len = ((tau.0 * tau.0 + tau.1 * tau.1) as f64).sqrt();
            let lhs = translation_lhs(&x, &psi, stats.center_freq, tau)?;
            Ok((lhs, sigma * len))
        })
        .collect::<Result<_>>()?;
    let violations = outcomes.iter().filter(|(lhs, bound)| lhs > &(bound + TRANSLATION_TOL)).count();
    let worst_slack = outcomes.iter().map(|(l, b)| b - l).fold(f64::INFINITY, f64::min);
    let worst_ratio = outcomes.iter().map(|(l, b)| l / b).fold(0.0, f64::max);
    Ok(TheoremReport::new("translation-bound", trials, violations, worst_slack)
        .with("size", size)
        .with("xi", format!("({:.4}, {:.4})", stats.center_freq[0], stats.center_freq[1]))
        .with("sigma", format!("{sigma:.4}"))
        .with("worst_ratio", format!("{worst_ratio:.4}"))
        .with("tolerance", TRANSLATION_TOL))
}

fn random_real_image(size: usize, rng: &mut rng::Rng) -> Result<RealImage> {
    RealImage::new(1, size, size, (0..size * size).map(|_| StandardNormal.sample(rng)).collect())
}

fn exact_modulus(x: &RealImage, filter: &Filter) -> Result<Vec<f64>> {
    Ok(conv2d_periodic(&ComplexFeatureMap::from_real(x), filter)?
        .data()
        .iter()
        .map(|z| z.norm())
        .collect())
}

/// Largest error of the `n`-phase quadrature relative to `max |x ∗ ψ|`, for each `n`.
pub fn relu_quadrature_errors(x: &RealImage, filter: &Filter, ns: &[usize]) -> Result<Vec<f64>> {
    let exact = exact_modulus(x, filter)?;
    let scale = exact.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    ns.iter()
        .map(|&n| {
            let approx = modulus_from_relus(x, filter, PhaseSum::Quadrature(n))?;
            Ok(approx.iter().zip(&exact).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max) / scale)
        })
        .collect()
}

/// For random real images: the `n_grid`-phase quadrature against the exact
/// modulus, and `|x∗ψ| ≤ S₄ ≤ √2|x∗ψ|` at every pixel.
pub fn check_modulus_relu(
    filter: &Filter,
    n_grid: usize,
    images: usize,
    size: usize,
    seed: u64,
) -> Result<TheoremReport> {
    let outcomes: Vec<(f64, usize, f64)> = (0..images)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "relu-phase", t as u64);
            let x = random_real_image(size, &mut rng)?;
            let exact = exact_modulus(&x, filter)?;
            let scale = exact.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let quad = relu_quadrature_errors(&x, filter, &[n_grid])?[0];
            let s4 = modulus_from_relus(&x, filter, PhaseSum::FourPhase)?;
            let tol = SANDWICH_TOL * scale;
            let mut bad = 0;
            let mut slack = f64::INFINITY;
            for (&s, &m) in s4.iter().zip(&exact) {
                let lower = s - m;
                let upper = SQRT_2 * m - s;
                if lower < -tol || upper < -tol {
                    bad += 1;
                }
                slack = slack.min(lower.min(upper) / scale);
            }
            Ok((quad, bad, slack))
        })
        .collect::<Result<_>>()?;
    let worst_quad = outcomes.iter().map(|o| o.0).fold(0.0, f64::max);
    let quad_fail = outcomes.iter().filter(|o| o.0 > QUADRATURE_TOL).count();
    let sandwich_fail: usize = outcomes.iter().map(|o| o.1).sum();
    let sandwich_slack = outcomes.iter().map(|o| o.2).fold(f64::INFINITY, f64::min);
    Ok(TheoremReport::new(
        "modulus-relu",
        images,
        quad_fail + sandwich_fail,
        (QUADRATURE_TOL - worst_quad).min(sandwich_slack),
    )
    .with("phases", n_grid)
    .with("size", size)
    .with("max_quadrature_error", format!("{worst_quad:.3e}"))
    .with("quadrature_failures", quad_fail)
    .with("sandwich_violations", sandwich_fail)
    .with("sandwich_slack", format!("{sandwich_slack:.3e}")))
}

/// `b|w| + ½|w − z|²`.
pub fn prox_objective(w: Complex64, z: Complex64, b: f64) -> f64 {
    b * w.norm() + 0.5 * (w - z).norm_sqr()
}

/// Minimizes [`prox_objective`] over `w ∈ ℂ` by a coarse grid followed by
/// successively finer grids around the incumbent. The origin is always a
/// candidate. Returns the minimizer and the lowest objective seen at any grid point.
pub fn prox_grid_search(z: Complex64, b: f64) -> (Complex64, f64) {
    const COARSE: i32 = 40;
    const FINE: i32 = 16;
    const MAX_ROUNDS: usize = 10_000;
    let f = |w: Complex64| prox_objective(w, z, b);
    let mut best = Complex64::default();
    let mut best_val = f(best);
    let visit = |w: Complex64, best: &mut Complex64, best_val: &mut f64| {
        let v = f(w);
        if v < *best_val {
            *best = w;
            *best_val = v;
        }
    };
    let center = z / 2.0;
    let half = z.norm() / 2.0 + 1.0;
    let step = 2.0 * half / COARSE as f64;
    for i in -COARSE / 2..=COARSE / 2 {
        for j in -COARSE / 2..=COARSE / 2 {
            visit(center + Complex64::new(i as f64, j as f64) * step, &mut best, &mut best_val);
        }
    }
    visit(z, &mut best, &mut best_val);
    // Each round scans a (2·FINE+1)² window around the incumbent. The spacing
    // shrinks only when the incumbent ends up strictly inside the window, so
    // the search can follow narrow valleys near the origin.
    let mut spacing = 2.0 * step / FINE as f64;
    let mut rounds = 0;
    while spacing > 1e-10 && rounds < MAX_ROUNDS {
        rounds += 1;
        let c = best;
        let mut on_edge = false;
        for i in -FINE..=FINE {
            for j in -FINE..=FINE {
                let before = best_val;
                visit(c + Complex64::new(i as f64, j as f64) * spacing, &mut best, &mut best_val);
                if best_val < before {
                    on_edge = i.abs() == FINE || j.abs() == FINE;
                }
            }
        }
        if !on_edge {
            spacing /= 4.0;
        }
    }
    (best, best_val)
}

/// Random `(z, b)` pairs: `z` complex Gaussian with per-part deviation 2,
/// `b` uniform on `[0, 3)`, and every tenth pair with `b = 0`.
pub fn random_prox_samples(n: usize, seed: u64) -> Vec<(Complex64, f64)> {
    let mut rng = rng::stream(seed, "prox", 0);
    (0..n)
        .map(|i| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let b = if i % 10 == 0 { 0.0 } else { rng.random_range(0.0..3.0) };
            (Complex64::new(2.0 * re, 2.0 * im), b)
        })
        .collect()
}

/// Soft thresholding against a direct search of the proximal objective.
pub fn check_prox_soft_threshold(samples: &[(Complex64, f64)]) -> Result<TheoremReport> {
    if let Some((_, b)) = samples.iter().find(|(_, b)| b.is_nan() || *b < 0.0) {
        return Err(Error::param(format!("threshold must be non-negative, got {b}")));
    }
    let outcomes: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|&(z, b)| {
            let closed = soft_threshold(z, b);
            let (found, lowest) = prox_grid_search(z, b);
            ((found - closed).norm(), prox_objective(closed, z, b) - lowest)
        })
        .collect();
    let violations = outcomes
        .iter()
        .filter(|(dist, gain)| *dist > PROX_TOL || *gain > PROX_OBJECTIVE_TOL)
        .count();
    let worst_dist = outcomes.iter().map(|o| o.0).fold(0.0, f64::max);
    let worst_gain = outcomes.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(TheoremReport::new("prox-soft-threshold", samples.len(), violations, PROX_TOL - worst_dist)
        .with("max_distance", format!("{worst_dist:.3e}"))
        .with("max_objective_gain", format!("{worst_gain:.3e}"))
        .with("tolerance", PROX_TOL))
}
