use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{self, Rng};

/// A Haar-distributed `d × d` unitary from stream `index` of `seed`.
pub fn random_unitary(d: usize, seed: u64, index: u64) -> DMatrix<Complex64> {
    random_unitary_with(d, &mut rng::stream(seed, "unitary", index))
}

/// QR of an i.i.d. standard complex Gaussian matrix, with the phases of
/// `diag(R)` moved into `Q` so that the distribution is exactly Haar.
pub fn random_unitary_with(d: usize, rng: &mut Rng) -> DMatrix<Complex64> {
    let z = DMatrix::from_fn(d, d, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    });
    let qr = z.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        let rjj = r[(j, j)];
        let phase = if rjj.norm() > 0.0 { rjj / rjj.norm() } else { Complex64::new(1.0, 0.0) };
        for i in 0..d {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// `‖D*D − I‖_F`.
pub fn unitarity_defect(d: &DMatrix<Complex64>) -> f64 {
    if !d.is_square() {
        return f64::INFINITY;
    }
    let gram = d.adjoint() * d;
    (gram - DMatrix::identity(d.nrows(), d.ncols())).norm()
}

/// The unitary DFT matrix `F_{jk} = e^{−2πi jk/d}/√d`.
pub fn dft_matrix(d: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (d as f64).sqrt();
    DMatrix::from_fn(d, d, |j, k| {
        Complex64::from_polar(scale, -2.0 * PI * ((j * k) % d) as f64 / d as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unitary_and_unit_columns() {
        for d in [1, 2, 5, 16] {
            let u = random_unitary(d, 3, 0);
            assert!(unitarity_defect(&u) <= 1e-10, "d={d}");
            for j in 0..d {
                assert!((u.column(j).norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!((random_unitary(1, 9, 4)[(0, 0)].norm() - 1.0).abs() < 1e-15);
        assert!(unitarity_defect(&dft_matrix(7)) < 1e-12);
        assert!(unitarity_defect(&DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0))) > 1.0);
    }

    #[test]
    fn haar_second_moment() {
        let d = 4;
        let draws = 10_000;
        let samples: Vec<f64> = (0..draws).map(|i| random_unitary(d, 11, i).index((0, 0)).norm_sqr()).collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((mean - 1.0 / d as f64).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn phase_of_diagonal_is_uniform() {
        // Without the phase fix the diagonal of R is real positive and the
        // first entry of Q has a biased phase. Its mean must vanish.
        let n = 4000;
        let mean: Complex64 = (0..n).map(|i| {
            let u = random_unitary(2, 5, i);
            u[(0, 0)] / u[(0, 0)].norm()
        }).sum::<Complex64>() / n as f64;
        assert!(mean.norm() < 4.0 / (n as f64).sqrt(), "{mean}");
    }
}
