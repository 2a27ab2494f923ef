use num_complex::Complex64;

use super::ComplexFeatureMap;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::filterbank::Filter;

/// Filters with more taps than this go through the FFT path.
pub const FFT_AREA_THRESHOLD: usize = 49;

fn check_fits(x: &ComplexFeatureMap, f: &Filter) -> Result<()> {
    if f.size() > x.height() || f.size() > x.width() {
        return Err(Error::size(format!(
            "{0}×{0} filter does not fit a {1}×{2} map",
            f.size(),
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// Circular convolution `(x ∗ f)(u) = Σ_v f(v) x(u − v)` of every channel.
pub fn conv2d_periodic(x: &ComplexFeatureMap, f: &Filter) -> Result<ComplexFeatureMap> {
    if f.size() * f.size() > FFT_AREA_THRESHOLD {
        conv2d_fft(x, f)
    } else {
        conv2d_direct(x, f)
    }
}

/// Direct-sum circular convolution, `O(HW·N²)` per channel.
pub fn conv2d_direct(x: &ComplexFeatureMap, f: &Filter) -> Result<ComplexFeatureMap> {
    check_fits(x, f)?;
    let mut out = ComplexFeatureMap::zeros(x.channels(), x.height(), x.width());
    for c in 0..x.channels() {
        direct_plane(x.channel(c), out.channel_mut(c), x.height(), x.width(), f, false);
    }
    Ok(out)
}

/// Circular correlation with the conjugated filter,
/// `out(u) = Σ_v conj(f(v)) y(u + v)`: the adjoint of [`conv2d_periodic`].
pub fn correlate2d_periodic(y: &ComplexFeatureMap, f: &Filter) -> Result<ComplexFeatureMap> {
    check_fits(y, f)?;
    let mut out = ComplexFeatureMap::zeros(y.channels(), y.height(), y.width());
    for c in 0..y.channels() {
        direct_plane(y.channel(c), out.channel_mut(c), y.height(), y.width(), f, true);
    }
    Ok(out)
}

pub(crate) fn direct_plane(
    src: &[Complex64],
    dst: &mut [Complex64],
    h: usize,
    w: usize,
    f: &Filter,
    adjoint: bool,
) {
    let half = f.half() as isize;
    let (hi, wi) = (h as isize, w as isize);
    for du in -half..=half {
        for dv in -half..=half {
            let tap = if adjoint { f.at(du, dv).conj() } else { f.at(du, dv) };
            if tap == Complex64::default() {
                continue;
            }
            // forward reads x(u − v), adjoint reads y(u + v)
            let (sr, sc) = if adjoint { (du, dv) } else { (-du, -dv) };
            for r in 0..h {
                let rr = (r as isize + sr).rem_euclid(hi) as usize;
                let src_row = &src[rr * w..(rr + 1) * w];
                let dst_row = &mut dst[r * w..(r + 1) * w];
                let shift = sc.rem_euclid(wi) as usize;
                // dst[col] += tap * src_row[(col + shift) % w]
                let (head, tail) = src_row.split_at(shift);
                let split = w - shift;
                for (d, s) in dst_row[..split].iter_mut().zip(tail) {
                    *d += tap * s;
                }
                for (d, s) in dst_row[split..].iter_mut().zip(head) {
                    *d += tap * s;
                }
            }
        }
    }
}

/// The filter wrapped onto an `h × w` torus, origin at index 0.
pub(crate) fn embed_periodic(f: &Filter, h: usize, w: usize) -> Vec<Complex64> {
    let half = f.half() as isize;
    let mut k = vec![Complex64::default(); h * w];
    for du in -half..=half {
        for dv in -half..=half {
            let r = du.rem_euclid(h as isize) as usize;
            let c = dv.rem_euclid(w as isize) as usize;
            k[r * w + c] += f.at(du, dv);
        }
    }
    k
}

pub(crate) fn filter_spectrum(f: &Filter, fft: &Fft2) -> Vec<Complex64> {
    let mut k = embed_periodic(f, fft.height(), fft.width());
    fft.forward(&mut k);
    k
}

/// FFT-based circular convolution.
pub fn conv2d_fft(x: &ComplexFeatureMap, f: &Filter) -> Result<ComplexFeatureMap> {
    check_fits(x, f)?;
    let fft = Fft2::new(x.height(), x.width());
    let spectrum = filter_spectrum(f, &fft);
    let mut out = x.clone();
    for c in 0..x.channels() {
        let plane = out.channel_mut(c);
        fft.forward(plane);
        for (v, k) in plane.iter_mut().zip(&spectrum) {
            *v *= k;
        }
        fft.inverse(plane);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::translate;
    use super::*;
    use crate::filterbank::{build_morlet, MorletParams};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> ComplexFeatureMap {
        let mut r = rng::stream(seed, "test-map", 0);
        ComplexFeatureMap::from_fn(c, h, w, |_, _, _| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
    }

    fn random_filter(seed: u64, n: usize) -> Filter {
        let mut r = rng::stream(seed, "test-filter", 0);
        let taps = (0..n * n).map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect();
        Filter::from_taps(n, taps).unwrap()
    }

    /// Textbook quadruple loop, kept apart from the row-sliced kernel above.
    fn brute_force(x: &ComplexFeatureMap, f: &Filter) -> ComplexFeatureMap {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let half = f.half() as isize;
        ComplexFeatureMap::from_fn(x.channels(), x.height(), x.width(), |c, r, col| {
            let mut acc = Complex64::default();
            for du in -half..=half {
                for dv in -half..=half {
                    let rr = (r as isize - du).rem_euclid(h) as usize;
                    let cc = (col as isize - dv).rem_euclid(w) as usize;
                    acc += f.at(du, dv) * x.get(c, rr, cc);
                }
            }
            acc
        })
    }

    fn rel_err(a: &ComplexFeatureMap, b: &ComplexFeatureMap) -> f64 {
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm_sqr()).sum();
        diff.sqrt() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn dirac_is_identity() {
        let x = random_map(1, 2, 10, 10);
        for n in [1, 3, 9] {
            let d = Filter::dirac(n).unwrap();
            assert_eq!(conv2d_direct(&x, &d).unwrap(), x);
            assert!(rel_err(&conv2d_fft(&x, &d).unwrap(), &x) < 1e-14);
        }
    }

    #[test]
    fn zero_mean_filter_kills_constants() {
        let f = build_morlet(MorletParams::first_layer(0.0).rotated(0.4), 15).unwrap();
        let x = ComplexFeatureMap::from_fn(1, 32, 32, |_, _, _| Complex64::new(0.7, 0.0));
        assert!(conv2d_periodic(&x, &f).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let x = random_map(2, 1, 8, 8);
        let f = random_filter(3, 5);
        let oracle = brute_force(&x, &f);
        assert!(rel_err(&conv2d_direct(&x, &f).unwrap(), &oracle) < 1e-10);
        assert!(rel_err(&conv2d_fft(&x, &f).unwrap(), &oracle) < 1e-10);
    }

    #[test]
    fn fft_and_direct_agree_on_all_small_sizes() {
        for h in 1..=16 {
            for w in 1..=16 {
                let x = random_map((h * 31 + w) as u64, 1, h, w);
                for n in (1..=9).step_by(2).filter(|&n| n <= h.min(w)) {
                    let f = random_filter((h * w * n) as u64, n);
                    let a = conv2d_direct(&x, &f).unwrap();
                    let b = conv2d_fft(&x, &f).unwrap();
                    assert!(rel_err(&b, &a) <= 1e-10, "h={h} w={w} n={n}");
                }
            }
        }
    }

    #[test]
    fn oversized_filter_is_rejected() {
        let x = random_map(4, 1, 8, 8);
        let f = random_filter(5, 9);
        assert!(matches!(conv2d_periodic(&x, &f), Err(Error::Size(_))));
    }

    #[test]
    fn correlation_is_the_adjoint() {
        let x = random_map(6, 2, 8, 10);
        let y = random_map(7, 2, 8, 10);
        let f = random_filter(8, 5);
        let lhs = conv2d_direct(&x, &f).unwrap().real_inner(&y);
        let rhs = x.real_inner(&correlate2d_periodic(&y, &f).unwrap());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn covariant_under_integer_shifts(seed in 0u64..1000, tr in -20isize..20, tc in -20isize..20) {
            let x = random_map(seed, 1, 12, 10);
            let f = random_filter(seed + 1, 5);
            let a = translate(&conv2d_direct(&x, &f).unwrap(), (tr, tc));
            let b = conv2d_direct(&translate(&x, (tr, tc)), &f).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn linear_in_the_input(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_map(seed, 1, 10, 10);
            let y = random_map(seed + 7, 1, 10, 10);
            let f = random_filter(seed + 3, 9);
            let (ca, cb) = (Complex64::new(a, 0.5), Complex64::new(b, -1.0));
            let combo = ComplexFeatureMap::from_fn(1, 10, 10, |c, r, w| ca * x.get(c, r, w) + cb * y.get(c, r, w));
            let lhs = conv2d_periodic(&combo, &f).unwrap();
            let fx = conv2d_periodic(&x, &f).unwrap();
            let fy = conv2d_periodic(&y, &f).unwrap();
            let rhs = ComplexFeatureMap::from_fn(1, 10, 10, |c, r, w| ca * fx.get(c, r, w) + cb * fy.get(c, r, w));
            prop_assert!(rel_err(&lhs, &rhs) < 1e-12);
        }
    }
}
