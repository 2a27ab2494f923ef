use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use super::ensemble::{AmplitudeLaw, SyntheticEnsemble};
use super::unitary::random_unitary;
use super::TheoremReport;
use crate::error::{Error, Result};
use crate::linalg::matmul;

/// `√π/2 − 0.02`: the empirical floor for the ℓ¹ ratio.
pub const SPARSITY_FLOOR: f64 = 0.886_226_925_452_758 - 0.02;
/// Threshold used to sparsify the Gaussian amplitudes.
const SPARSIFY_B: f64 = 0.5;
/// Rows multiplied at a time.
const BLOCK: usize = 8192;

/// `Σ‖D′x‖₁ / Σ‖x‖₁` over the rows of an `n × d` sample array.
pub fn l1_ratio(samples: &[Complex64], dmat: &DMatrix<Complex64>) -> Result<f64> {
    let d = dmat.nrows();
    if !dmat.is_square() || d == 0 || !samples.len().is_multiple_of(d) {
        return Err(Error::shape("samples must be rows of the matrix dimension"));
    }
    let mut num = 0.0;
    let mut buf = Vec::new();
    for block in samples.chunks(BLOCK * d) {
        let rows = block.len() / d;
        buf.resize(block.len(), Complex64::default());
        matmul(block, dmat.as_slice(), &mut buf, rows, d, d);
        num += buf.iter().map(|z| z.norm()).sum::<f64>();
    }
    let den: f64 = samples.iter().map(|z| z.norm()).sum();
    if den == 0.0 {
        return Err(Error::Degenerate("all samples are zero".into()));
    }
    Ok(num / den)
}

/// The ℓ¹ ratio for `trials` Haar unitaries, all applied to the same samples.
pub fn sparsification_ratios(
    ensemble: &SyntheticEnsemble,
    trials: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let samples = ensemble.sample(mc_samples, seed)?;
    (0..trials)
        .into_par_iter()
        .map(|t| l1_ratio(&samples, &random_unitary(ensemble.dim, seed, t as u64)))
        .collect()
}

/// Uniform independent phases with soft-thresholded Gaussian amplitudes,
/// against [`SPARSITY_FLOOR`] for every sampled unitary.
pub fn check_sparsification_floor(d: usize, trials: usize, mc_samples: usize, seed: u64) -> Result<TheoremReport> {
    if d == 0 || trials == 0 || mc_samples == 0 {
        return Err(Error::param("dimension, trials and samples must be positive"));
    }
    let ensemble = SyntheticEnsemble::uniform_phase(d, AmplitudeLaw::SoftThresholdedGaussian { b: SPARSIFY_B }, seed);
    let ratios = sparsification_ratios(&ensemble, trials, mc_samples, seed)?;
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = ratios.iter().sum::<f64>() / trials as f64;
    let violations = ratios.iter().filter(|&&r| r < SPARSITY_FLOOR).count();
    Ok(TheoremReport::new("sparsification", trials, violations, min - SPARSITY_FLOOR)
        .with("dim", d)
        .with("samples", mc_samples)
        .with("threshold", SPARSIFY_B)
        .with("min_ratio", format!("{min:.5}"))
        .with("mean_ratio", format!("{mean:.5}"))
        .with("floor", format!("{SPARSITY_FLOOR:.5}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::dft_matrix;
    use std::f64::consts::PI;

    #[test]
    fn one_dimension_is_exact() {
        let e = SyntheticEnsemble::uniform_phase(1, AmplitudeLaw::SoftThresholdedGaussian { b: 0.5 }, 0);
        for r in sparsification_ratios(&e, 10, 1000, 0).unwrap() {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_amplitudes_under_dft() {
        // d = 2: E|1 + e^{iθ}|/√2 = (4/π)/√2.
        let e = SyntheticEnsemble::uniform_phase(2, AmplitudeLaw::Fixed(vec![1.0; 2]), 1);
        let r = l1_ratio(&e.sample(200_000, 0).unwrap(), &dft_matrix(2)).unwrap();
        assert!((r - 4.0 / PI / 2f64.sqrt()).abs() < 0.005, "{r}");
        // Large d: every output coordinate is close to complex normal, E|Z| = √π/2.
        let e = SyntheticEnsemble::uniform_phase(64, AmplitudeLaw::Fixed(vec![1.0; 64]), 1);
        let r = l1_ratio(&e.sample(20_000, 0).unwrap(), &dft_matrix(64)).unwrap();
        assert!((r - PI.sqrt() / 2.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn floor_holds_at_small_scale() {
        let r = check_sparsification_floor(4, 10, 20_000, 3).unwrap();
        assert!(r.pass, "{r}");
        assert!(check_sparsification_floor(0, 1, 1, 0).is_err());
    }
}
