//! Dense complex matrix products on row-major slices.

use num_complex::Complex64;

/// `c = a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub fn matmul(a: &[Complex64], b: &[Complex64], c: &mut [Complex64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm(a, (k as isize, 1), b, (n as isize, 1), c, m, k, n, 0.0);
}

/// `c += aᵀ · b` (plain transpose, no conjugation) with `a: k×m`, `b: k×n`.
pub fn matmul_tn_acc(a: &[Complex64], b: &[Complex64], c: &mut [Complex64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm(a, (1, m as isize), b, (n as isize, 1), c, m, k, n, 1.0);
}

/// `c += a · bᵀ` (plain transpose) with `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc(a: &[Complex64], b: &[Complex64], c: &mut [Complex64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    gemm(a, (k as isize, 1), b, (1, k as isize), c, m, k, n, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[Complex64],
    (rsa, csa): (isize, isize),
    b: &[Complex64],
    (rsb, csb): (isize, isize),
    c: &mut [Complex64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(Complex64::default());
        }
        return;
    }
    // SAFETY: Complex64 is #[repr(C)] { re, im }, layout-identical to [f64; 2];
    // the slice length asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            rsa,
            csa,
            b.as_ptr() as *const [f64; 2],
            rsb,
            csb,
            [beta, 0.0],
            c.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
}

pub fn conj_vec(v: &[Complex64]) -> Vec<Complex64> {
    v.iter().map(|z| z.conj()).collect()
}
