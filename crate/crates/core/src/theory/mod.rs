//! Numerical checks of the identities and inequalities the architecture rests on.
//!
//! Every check is deterministic given its seed. Random draws for trial `t`
//! come from their own stream, so results do not depend on how trials are
//! scheduled across threads.

mod ensemble;
mod entropy;
mod identities;
mod sparsity;
mod unitary;

use std::fmt;

pub use ensemble::{AmplitudeLaw, EnsembleKind, SyntheticEnsemble};
pub use entropy::{
    check_entropy_bound, conditional_phase_entropy, phase_entropy, EntropyEstimate, HISTOGRAM_BINS, KNN_K,
    MIN_CELL,
};
pub use identities::{
    check_fourier_shift, check_fourier_shift_random, check_modulus_relu, check_prox_soft_threshold,
    check_translation_bound, prox_grid_search, prox_objective, random_prox_samples, relu_quadrature_errors,
    translation_lhs, FOURIER_TOL, PROX_TOL, SANDWICH_TOL, TRANSLATION_TOL,
};
pub use sparsity::{check_sparsification_floor, l1_ratio, sparsification_ratios, SPARSITY_FLOOR};
pub use unitary::{dft_matrix, random_unitary, random_unitary_with, unitarity_defect};

use crate::error::Result;
use crate::filterbank::{build_bank, BlockLayer, Filter, DEFAULT_GRID};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Bound minus observed value at the worst trial. Negative means violated.
    pub worst_slack: f64,
    /// Parameters and secondary measurements, in insertion order.
    pub params: Vec<(String, String)>,
    pub pass: bool,
}

impl TheoremReport {
    pub const CSV_HEADER: [&'static str; 5] = ["name", "trials", "violations", "worst_slack", "pass"];

    /// A report that passes exactly when there are no violations.
    pub fn new(name: impl Into<String>, trials: usize, violations: usize, worst_slack: f64) -> Self {
        TheoremReport {
            name: name.into(),
            trials,
            violations,
            worst_slack,
            params: Vec::new(),
            pass: violations == 0,
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.trials.to_string(),
            self.violations.to_string(),
            format!("{:e}", self.worst_slack),
            self.pass.to_string(),
        ]
    }
}

impl fmt::Display for TheoremReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>4}  trials {:>8}  violations {:>6}  worst_slack {:>+12.4e}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.trials,
            self.violations,
            self.worst_slack
        )?;
        for (k, v) in &self.params {
            write!(f, "\n    {k:<20} {v}")?;
        }
        Ok(())
    }
}

/// Every filter used by the shipped network configurations, with a label:
/// the shared low-pass and the band-pass filters of both block layers.
pub fn shipped_filters() -> Result<Vec<(String, Filter)>> {
    let angles = crate::network::NetworkConfig::desk().angles;
    let first = build_bank(angles, BlockLayer::First, DEFAULT_GRID)?;
    let second = build_bank(angles, BlockLayer::Second, DEFAULT_GRID)?;
    let mut out = vec![("lowpass".to_string(), first.low_pass().clone())];
    for (tag, bank) in [("first", &first), ("second", &second)] {
        for (l, f) in bank.band_pass().iter().enumerate() {
            out.push((format!("{tag}{}", l + 1), f.clone()));
        }
    }
    Ok(out)
}

/// A group of checks selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    /// Fourier shift identity and the translation bound for every shipped filter.
    Translation,
    /// ReLU phase integral and the four-phase sandwich.
    ModulusRelu,
    /// Soft thresholding as a proximal operator.
    Prox,
    /// Phase entropy lower bound.
    Entropy,
    /// ℓ¹ sparsification floor.
    Sparsification,
}

impl Check {
    pub const ALL: [Check; 5] =
        [Check::Translation, Check::ModulusRelu, Check::Prox, Check::Entropy, Check::Sparsification];
}

/// Runs the selected checks at their default sizes. `trials` overrides the
/// primary trial count of each check.
pub fn run_checks(checks: &[Check], seed: u64, trials: Option<usize>) -> Result<Vec<TheoremReport>> {
    let mut reports = Vec::new();
    for &check in checks {
        match check {
            Check::Translation => {
                reports.push(check_fourier_shift_random(trials.unwrap_or(100), 16, seed)?);
                for (label, f) in shipped_filters()? {
                    let mut r = check_translation_bound(&f, trials.unwrap_or(1000), 32, seed)?;
                    r.name = format!("translation-bound/{label}");
                    reports.push(r);
                }
            }
            Check::ModulusRelu => {
                for (label, f) in shipped_filters()?.into_iter().skip(1) {
                    let mut r = check_modulus_relu(&f, 1024, trials.unwrap_or(100), 32, seed)?;
                    r.name = format!("modulus-relu/{label}");
                    reports.push(r);
                }
            }
            Check::Prox => {
                let samples = random_prox_samples(trials.unwrap_or(10_000), seed);
                reports.push(check_prox_soft_threshold(&samples)?);
            }
            Check::Entropy => {
                for d in [1, 2, 4] {
                    let ensemble = SyntheticEnsemble::isotropic_gaussian(d, 1.0, seed);
                    let dmat = random_unitary(d, seed, d as u64);
                    let mut r = check_entropy_bound(&ensemble, &dmat, trials.unwrap_or(100_000), seed)?;
                    r.name = format!("entropy-bound/d{d}");
                    reports.push(r);
                }
            }
            Check::Sparsification => {
                for d in [2, 4, 8, 16] {
                    let mut r = check_sparsification_floor(d, trials.unwrap_or(100), 100_000, seed)?;
                    r.name = format!("sparsification/d{d}");
                    reports.push(r);
                }
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_pass_tracks_violations() {
        let ok = TheoremReport::new("a", 10, 0, 0.5).with("tol", 1e-9);
        assert!(ok.pass);
        assert_eq!(ok.param("tol"), Some("0.000000001"));
        assert_eq!(ok.csv_fields(), vec!["a", "10", "0", "5e-1", "true"]);
        assert!(!TheoremReport::new("b", 10, 1, -0.1).pass);
        let text = ok.to_string();
        assert!(text.contains("PASS") && text.contains("tol"));
    }

    #[test]
    fn shipped_filters_cover_both_banks() {
        let filters = shipped_filters().unwrap();
        assert_eq!(filters.len(), 9);
        assert_eq!(filters[0].0, "lowpass");
        assert_eq!(filters[8].0, "second4");
    }
}
