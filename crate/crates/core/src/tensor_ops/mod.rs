//! Complex feature maps, periodic convolution, subsampling, and the wavelet
//! operator `W` with its adjoint.

mod conv;
mod map;
mod wavelet;

pub use conv::{conv2d_direct, conv2d_fft, conv2d_periodic, correlate2d_periodic, FFT_AREA_THRESHOLD};
pub use map::{ComplexFeatureMap, RealImage};
pub use wavelet::{adjoint_bank, apply_bank, upsample2_adjoint, BankPlan};

use crate::error::{Error, Result};

/// Circular shift: `out(u) = x(u − τ)` with `τ = (rows, cols)`.
pub fn translate(x: &ComplexFeatureMap, tau: (isize, isize)) -> ComplexFeatureMap {
    let (h, w) = (x.height(), x.width());
    let mut out = ComplexFeatureMap::zeros(x.channels(), h, w);
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..h {
            let sr = (r as isize - tau.0).rem_euclid(h as isize) as usize;
            for col in 0..w {
                let sc = (col as isize - tau.1).rem_euclid(w as isize) as usize;
                dst[r * w + col] = src[sr * w + sc];
            }
        }
    }
    out
}

/// Keeps samples at even `(row, col)`.
pub fn subsample2(x: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
    let (h, w) = (x.height(), x.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::size(format!("cannot subsample a {h}×{w} map by 2")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = ComplexFeatureMap::zeros(x.channels(), oh, ow);
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..oh {
            for col in 0..ow {
                dst[r * ow + col] = src[2 * r * w + 2 * col];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn translate_identities() {
        let x = ComplexFeatureMap::from_fn(2, 4, 6, |c, r, w| Complex64::new((c * 100 + r * 10 + w) as f64, r as f64));
        assert_eq!(translate(&x, (0, 0)), x);
        assert_eq!(translate(&x, (4, 6)), x);
        assert_eq!(translate(&translate(&x, (1, -2)), (-1, 2)), x);
        assert_eq!(translate(&x, (1, 0)).get(0, 1, 3), x.get(0, 0, 3));
    }

    #[test]
    fn subsample_ramp_and_errors() {
        let x = ComplexFeatureMap::from_fn(1, 4, 4, |_, r, c| Complex64::new((r * 4 + c) as f64, 0.0));
        let s = subsample2(&x).unwrap();
        let got: Vec<f64> = s.data().iter().map(|z| z.re).collect();
        assert_eq!(got, vec![0.0, 2.0, 8.0, 10.0]);

        let constant = ComplexFeatureMap::from_fn(1, 6, 4, |_, _, _| Complex64::new(2.0, -1.0));
        assert!(subsample2(&constant).unwrap().data().iter().all(|&z| z == Complex64::new(2.0, -1.0)));

        let odd = ComplexFeatureMap::zeros(1, 5, 4);
        assert!(matches!(subsample2(&odd), Err(Error::Size(_))));
    }

    #[test]
    fn subsample_commutes_with_even_shifts() {
        let x = ComplexFeatureMap::from_fn(1, 8, 8, |_, r, c| Complex64::new((r * 8 + c) as f64, (r as f64).sin()));
        let lhs = subsample2(&translate(&x, (2, 2))).unwrap();
        let rhs = translate(&subsample2(&x).unwrap(), (1, 1));
        assert_eq!(lhs, rhs);
    }
}
