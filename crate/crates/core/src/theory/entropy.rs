use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use super::ensemble::{EnsembleKind, SyntheticEnsemble};
use super::unitary::unitarity_defect;
use super::TheoremReport;
use crate::error::{Error, Result};
use crate::linalg::matmul;

/// Neighbor rank of the nearest-neighbor estimator.
pub const KNN_K: usize = 5;
/// Bins of the one-dimensional histogram estimator.
pub const HISTOGRAM_BINS: usize = 256;
/// Amplitude cells smaller than this are merged with their successors.
pub const MIN_CELL: usize = 100;
/// Largest number of amplitude quantile bins per axis.
const MAX_QUANTILES: usize = 8;
/// Samples per amplitude cell the quantile count aims for.
const TARGET_CELL: f64 = 1000.0;
/// Allowed `‖D*D − I‖_F`.
const UNITARY_TOL: f64 = 1e-8;
/// Relative tolerance on the entropy of exactly uniform phases.
const UNIFORM_REL_TOL: f64 = 0.02;
/// Standard errors the inequality may be missed by.
const SIGMAS: f64 = 3.0;

/// An entropy estimate in nats with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// `ψ(n)` for a positive integer.
fn digamma(n: usize) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if n < 20 {
        return -EULER + (1..n).map(|j| 1.0 / j as f64).sum::<f64>();
    }
    let x = n as f64;
    x.ln() - 1.0 / (2.0 * x) - 1.0 / (12.0 * x * x) + 1.0 / (120.0 * x.powi(4))
}

/// `ln` of the volume of the Euclidean unit ball in `ℝ^d`.
fn ln_unit_ball(d: usize) -> f64 {
    // Γ(d/2 + 1) by downward recursion to Γ(1) = 1 or Γ(1/2) = √π.
    let mut x = d as f64 / 2.0 + 1.0;
    let mut gamma = 1.0;
    while x > 1.25 {
        x -= 1.0;
        gamma *= x;
    }
    if (x - 0.5).abs() < 1e-9 {
        gamma *= PI.sqrt();
    }
    d as f64 / 2.0 * PI.ln() - gamma.ln()
}

fn wrap_phase(p: f64) -> f64 {
    p.rem_euclid(2.0 * PI)
}

/// Differential entropy of phase vectors on the torus `[0, 2π)^d`, given as
/// an `n × d` row-major array. Histogram for `d = 1`, nearest neighbors otherwise.
pub fn phase_entropy(phases: &[f64], d: usize) -> Result<EntropyEstimate> {
    if d == 0 || !phases.len().is_multiple_of(d) {
        return Err(Error::shape(format!("{} phases do not form rows of {d}", phases.len())));
    }
    let points: Vec<f64> = phases.iter().map(|&p| wrap_phase(p)).collect();
    if d == 1 {
        histogram_entropy(&points)
    } else {
        knn_entropy(&points, d)
    }
}

/// Plug-in histogram entropy with the Miller–Madow correction.
fn histogram_entropy(points: &[f64]) -> Result<EntropyEstimate> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Degenerate("histogram entropy needs at least two samples".into()));
    }
    let width = 2.0 * PI / HISTOGRAM_BINS as f64;
    let bin = |p: f64| ((p / width) as usize).min(HISTOGRAM_BINS - 1);
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    points.iter().for_each(|&p| counts[bin(p)] += 1);
    let terms: Vec<f64> = points
        .iter()
        .map(|&p| -(counts[bin(p)] as f64 / n as f64 / width).ln())
        .collect();
    let occupied = counts.iter().filter(|&&c| c > 0).count();
    let (mean, sd) = mean_sd(&terms);
    Ok(EntropyEstimate {
        value: mean + (occupied as f64 - 1.0) / (2.0 * n as f64),
        stderr: sd / (n as f64).sqrt(),
        samples: n,
    })
}

/// Circular distance between two phases in `[0, 2π)`.
fn circ(a: f64, b: f64) -> f64 {
    let t = (a - b).abs();
    t.min(2.0 * PI - t)
}

/// Kozachenko–Leonenko estimate with Euclidean distance on the torus.
fn knn_entropy(points: &[f64], d: usize) -> Result<EntropyEstimate> {
    let n = points.len() / d;
    if n <= KNN_K {
        return Err(Error::Degenerate(format!("{n} samples cannot give a {KNN_K}-th neighbor")));
    }
    let log_eps = knn_log_distances(points, d, KNN_K);
    if log_eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("coincident phase vectors".into()));
    }
    let (mean, sd) = mean_sd(&log_eps);
    let d_f = d as f64;
    Ok(EntropyEstimate {
        value: digamma(n) - digamma(KNN_K) + ln_unit_ball(d) + d_f * mean,
        stderr: d_f * sd / (n as f64).sqrt(),
        samples: n,
    })
}

/// `ln` of the distance from each point to its `k`-th nearest neighbor,
/// searched over a uniform grid of boxes on the torus.
fn knn_log_distances(points: &[f64], d: usize, k: usize) -> Vec<f64> {
    let n = points.len() / d;
    let mut g = ((n as f64 / k as f64).powf(1.0 / d as f64).floor() as usize).max(1);
    while g > 1 && g.checked_pow(d as u32).is_none_or(|c| c > n) {
        g -= 1;
    }
    let side = 2.0 * PI / g as f64;
    let coord = |p: f64| ((p / side) as usize).min(g - 1);
    let box_of = |i: usize| -> Vec<usize> { (0..d).map(|a| coord(points[i * d + a])).collect() };
    let flat = |b: &[usize]| b.iter().fold(0, |acc, &c| acc * g + c);

    let boxes = g.pow(d as u32);
    let mut starts = vec![0usize; boxes + 1];
    let owner: Vec<usize> = (0..n).map(|i| flat(&box_of(i))).collect();
    owner.iter().for_each(|&b| starts[b + 1] += 1);
    for b in 0..boxes {
        starts[b + 1] += starts[b];
    }
    let mut fill = starts.clone();
    let mut members = vec![0usize; n];
    for (i, &b) in owner.iter().enumerate() {
        members[fill[b]] = i;
        fill[b] += 1;
    }

    let dist2 = |i: usize, j: usize| -> f64 {
        (0..d).map(|a| circ(points[i * d + a], points[j * d + a]).powi(2)).sum()
    };

    (0..n)
        .into_par_iter()
        .map(|i| {
            // The k smallest squared distances seen so far, ascending.
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let offer = |v: f64, best: &mut Vec<f64>| {
                if best.len() < k || v < best[best.len() - 1] {
                    let pos = best.partition_point(|&b| b < v);
                    best.insert(pos, v);
                    best.truncate(k);
                }
            };
            let home = box_of(i);
            let mut r = 0usize;
            loop {
                if 2 * r + 1 >= g {
                    best.clear();
                    (0..n).filter(|&j| j != i).for_each(|j| offer(dist2(i, j), &mut best));
                    break;
                }
                let span = 2 * r + 1;
                for code in 0..span.pow(d as u32) {
                    let mut rem = code;
                    let mut on_ring = false;
                    let mut cell = 0;
                    for a in 0..d {
                        let o = (rem % span) as isize - r as isize;
                        rem /= span;
                        on_ring |= o.unsigned_abs() == r;
                        cell = cell * g + (home[a] as isize + o).rem_euclid(g as isize) as usize;
                    }
                    if !on_ring {
                        continue;
                    }
                    for &j in &members[starts[cell]..starts[cell + 1]] {
                        if j != i {
                            offer(dist2(i, j), &mut best);
                        }
                    }
                }
                // Points outside the visited block are at least r·side away.
                let reach = r as f64 * side;
                if best.len() == k && best[k - 1] <= reach * reach {
                    break;
                }
                r += 1;
            }
            0.5 * best[k - 1].ln()
        })
        .collect()
}

/// `H(φ | A)` for amplitude vectors `A` and phase vectors `φ`, both `n × d`.
///
/// Amplitudes are binned per axis at their empirical quantiles. Within each
/// cell the phase entropy is estimated by [`phase_entropy`], and the cell
/// estimates are averaged with weights proportional to cell size.
pub fn conditional_phase_entropy(amplitudes: &[f64], phases: &[f64], d: usize) -> Result<EntropyEstimate> {
    if d == 0 || amplitudes.len() != phases.len() || !phases.len().is_multiple_of(d) {
        return Err(Error::shape("amplitudes and phases must be matching n × d arrays"));
    }
    let n = phases.len() / d;
    let q = ((n as f64 / TARGET_CELL).powf(1.0 / d as f64).floor() as usize).clamp(1, MAX_QUANTILES);

    let mut cell = vec![0usize; n];
    for a in 0..d {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| amplitudes[i * d + a].total_cmp(&amplitudes[j * d + a]));
        for (rank, &i) in order.iter().enumerate() {
            cell[i] = cell[i] * q + rank * q / n;
        }
    }
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); q.pow(d as u32)];
    cell.iter().enumerate().for_each(|(i, &c)| by_cell[c].push(i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for members in by_cell {
        pending.extend(members);
        if pending.len() >= MIN_CELL {
            groups.push(std::mem::take(&mut pending));
        }
    }
    match groups.last_mut() {
        Some(last) => last.extend(pending),
        None => groups.push(pending),
    }

    let estimates: Vec<(usize, EntropyEstimate)> = groups
        .par_iter()
        .map(|members| {
            let sub: Vec<f64> = members.iter().flat_map(|&i| phases[i * d..(i + 1) * d].iter().copied()).collect();
            Ok((members.len(), phase_entropy(&sub, d)?))
        })
        .collect::<Result<_>>()?;
    let value = estimates.iter().map(|(m, e)| *m as f64 / n as f64 * e.value).sum();
    let var: f64 = estimates.iter().map(|(m, e)| (*m as f64 / n as f64 * e.stderr).powi(2)).sum();
    Ok(EntropyEstimate { value, stderr: var.sqrt(), samples: n })
}

/// Estimates `H(φ(DX) | |DX|)` and compares it with
/// `H(X) − d − 2d·ln(E‖DX‖₁/d)`.
///
/// The check fails when the estimated slack is below zero by more than three
/// standard errors. For an isotropic Gaussian the phases are exactly uniform,
/// and the estimate must also lie within 2% of `d·ln 2π`.
pub fn check_entropy_bound(
    ensemble: &SyntheticEnsemble,
    dmat: &DMatrix<Complex64>,
    mc_samples: usize,
    seed: u64,
) -> Result<TheoremReport> {
    let d = ensemble.dim;
    if dmat.nrows() != d || dmat.ncols() != d {
        return Err(Error::shape(format!("{}×{} matrix for dimension {d}", dmat.nrows(), dmat.ncols())));
    }
    let defect = unitarity_defect(dmat);
    if defect.is_nan() || defect > UNITARY_TOL {
        return Err(Error::param(format!("matrix is not unitary: ‖D*D − I‖ = {defect:.3e}")));
    }
    let h_x = ensemble
        .entropy()
        .ok_or_else(|| Error::param("the bound needs an ensemble with closed-form entropy"))?;
    if mc_samples < 2 * MIN_CELL {
        return Err(Error::param(format!("need at least {} samples", 2 * MIN_CELL)));
    }

    let x = ensemble.sample(mc_samples, seed)?;
    let mut y = vec![Complex64::default(); x.len()];
    // Rows of X times Dᵀ. Column-major D read row-major is Dᵀ.
    matmul(&x, dmat.as_slice(), &mut y, mc_samples, d, d);
    let amplitudes: Vec<f64> = y.iter().map(|z| z.norm()).collect();
    let phases: Vec<f64> = y.iter().map(|z| wrap_phase(z.arg())).collect();

    let l1: Vec<f64> = amplitudes.chunks(d).map(|row| row.iter().sum()).collect();
    let (l1_mean, l1_sd) = mean_sd(&l1);
    let d_f = d as f64;
    let rhs = h_x - d_f - 2.0 * d_f * (l1_mean / d_f).ln();
    let rhs_se = 2.0 * d_f * l1_sd / (l1_mean * (mc_samples as f64).sqrt());

    let lhs = conditional_phase_entropy(&amplitudes, &phases, d)?;
    let slack = lhs.value - rhs;
    let stderr = lhs.stderr.hypot(rhs_se);
    let mut violations = usize::from(slack < -SIGMAS * stderr);

    let mut report_uniform = None;
    if let EnsembleKind::ComplexGaussian { scales } = &ensemble.kind {
        if scales.iter().all(|&s| s == scales[0]) {
            let target = d_f * (2.0 * PI).ln();
            let rel = (lhs.value - target).abs() / target;
            violations += usize::from(rel > UNIFORM_REL_TOL);
            report_uniform = Some(rel);
        }
    }

    let mut report = TheoremReport::new("entropy-bound", mc_samples, violations, slack)
        .with("dim", d)
        .with("h_x", format!("{h_x:.5}"))
        .with("mean_l1", format!("{l1_mean:.5}"))
        .with("lhs", format!("{:.5} ± {:.5}", lhs.value, lhs.stderr))
        .with("rhs", format!("{rhs:.5} ± {rhs_se:.5}"))
        .with("slack_stderr", format!("{stderr:.5}"))
        .with("unitarity_defect", format!("{defect:.2e}"));
    if let Some(rel) = report_uniform {
        report = report.with("uniform_rel_error", format!("{rel:.5}"));
    }
    Ok(report)
}
