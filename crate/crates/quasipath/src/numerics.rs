//! Small shared numerical kernels: quadrature, scalar root finding,
//! tridiagonal solves, and log-log line fitting.

/// Abscissae (positive half) and weights of the 16-point Gauss-Legendre rule
/// on [-1, 1]. Exact for polynomials up to degree 31; for the smooth
/// integrands used here (curve speeds over one spline segment) the error is
/// at rounding level.
const GL16_X: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_8,
    0.755_404_408_355_003_0,
    0.865_631_202_387_831_8,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL16_W: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_8,
    0.062_253_523_938_647_9,
    0.027_152_459_411_754_1,
];

/// 16-point Gauss-Legendre quadrature of `f` over [a, b].
pub fn gauss16<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..8 {
        let dx = h * GL16_X[i];
        acc += GL16_W[i] * (f(c + dx) + f(c - dx));
    }
    acc * h
}

/// Adaptive Simpson quadrature of `f` over [a, b] to absolute tolerance
/// `tol`. The recursion depth is capped; integrands with kinks converge
/// slowly, so callers split at known kink locations first.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(a: f64, b: f64, tol: f64, f: &mut F) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(a, b, fa, fm, fb, whole, tol, f, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: FnMut(f64) -> f64>(
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    f: &mut F,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let err = left + right - whole;
    if depth == 0 || err.abs() <= 15.0 * tol {
        return left + right + err / 15.0;
    }
    simpson_rec(a, m, fa, flm, fm, left, 0.5 * tol, f, depth - 1)
        + simpson_rec(m, b, fm, frm, fb, right, 0.5 * tol, f, depth - 1)
}

/// Root of `f` in the bracket [lo, hi] (which must change sign), found with
/// the Illinois variant of regula falsi; superlinear on smooth functions and
/// never leaves the bracket. Converges to interval width or residual `tol`.
pub fn find_root<F: FnMut(f64) -> f64>(mut lo: f64, mut hi: f64, tol: f64, mut f: F) -> f64 {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return lo;
    }
    if fhi == 0.0 {
        return hi;
    }
    debug_assert!(
        flo * fhi < 0.0,
        "find_root requires a sign change: f({lo})={flo}, f({hi})={fhi}"
    );
    let mut side = 0i8;
    for _ in 0..200 {
        let x = (flo * hi - fhi * lo) / (flo - fhi);
        let fx = f(x);
        if fx.abs() <= tol || (hi - lo).abs() <= tol {
            return x;
        }
        if fx * flo < 0.0 {
            hi = x;
            fhi = fx;
            if side == -1 {
                flo *= 0.5;
            }
            side = -1;
        } else {
            lo = x;
            flo = fx;
            if side == 1 {
                fhi *= 0.5;
            }
            side = 1;
        }
    }
    0.5 * (lo + hi)
}

/// Solves a tridiagonal system in place with the Thomas algorithm.
///
/// `sub[i]` multiplies `x[i-1]` in row `i` (sub[0] unused), `diag[i]` is the
/// diagonal, `sup[i]` multiplies `x[i+1]` (sup[n-1] unused). Returns the
/// solution; panics on zero pivots (callers pass diagonally dominant
/// systems).
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    assert!(n >= 1 && sub.len() == n && sup.len() == n && rhs.len() == n);
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / m;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let xi = x[i] - c[i] * x[i + 1];
        x[i] = xi;
    }
    x
}

/// Solves a cyclic tridiagonal system (corner entries couple the first and
/// last unknowns) by the Sherman-Morrison correction of two ordinary
/// tridiagonal solves.
///
/// Row i reads: `sub[i]*x[i-1] + diag[i]*x[i] + sup[i]*x[i+1] = rhs[i]` with
/// indices mod n, so `sub[0]` and `sup[n-1]` are the corner entries.
pub fn solve_cyclic_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    assert!(n >= 3 && sub.len() == n && sup.len() == n && rhs.len() == n);
    let gamma = -diag[0];
    let mut d = diag.to_vec();
    d[0] -= gamma;
    d[n - 1] -= sup[n - 1] * sub[0] / gamma;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = sup[n - 1];
    let y = solve_tridiagonal(sub, &d, sup, rhs);
    let z = solve_tridiagonal(sub, &d, sup, &u);
    // v = (1, 0, ..., 0, sub[0]/gamma)
    let vy = y[0] + sub[0] / gamma * y[n - 1];
    let vz = z[0] + sub[0] / gamma * z[n - 1];
    let factor = vy / (1.0 + vz);
    y.iter().zip(&z).map(|(yi, zi)| yi - factor * zi).collect()
}

/// Least-squares straight line through `(x_i, y_i)`; returns `(slope,
/// intercept)`. Used for log-log scaling fits.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Wraps `x` into the half-open interval [0, period).
#[inline]
pub fn wrap(x: f64, period: f64) -> f64 {
    let r = x.rem_euclid(period);
    if r == period {
        0.0
    } else {
        r
    }
}

/// Wraps `x` into the symmetric interval (-period/2, period/2].
#[inline]
pub fn wrap_signed(x: f64, period: f64) -> f64 {
    let r = wrap(x, period);
    if r > 0.5 * period {
        r - period
    } else {
        r
    }
}

/// Orthonormal basis of the hyperplane orthogonal to `t`, as the columns of
/// an n x (n-1) matrix. Deterministic: Gram-Schmidt over the coordinate
/// directions, skipping the one most parallel to `t`.
pub fn orthonormal_complement(t: &nalgebra::DVector<f64>) -> nalgebra::DMatrix<f64> {
    let n = t.len();
    assert!(n >= 2, "no normal space in dimension {n}");
    let unit = t / t.norm();
    let mut cols: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(n - 1);
    // Dropping the coordinate axis with the largest |t| component keeps the
    // remaining set well conditioned.
    let skip = (0..n)
        .max_by(|&i, &j| unit[i].abs().partial_cmp(&unit[j].abs()).unwrap())
        .unwrap();
    for k in 0..n {
        if k == skip {
            continue;
        }
        let mut v = nalgebra::DVector::zeros(n);
        v[k] = 1.0;
        v -= &unit * unit[k];
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let norm = v.norm();
        assert!(norm > 1e-8, "degenerate normal frame");
        cols.push(v / norm);
    }
    nalgebra::DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss16_integrates_smooth_functions_to_rounding() {
        let val = gauss16(0.0, std::f64::consts::PI, |x| x.sin());
        assert!((val - 2.0).abs() < 1e-14, "{val}");
    }

    #[test]
    fn adaptive_simpson_hits_requested_tolerance() {
        let val = adaptive_simpson(0.0, 1.0, 1e-12, &mut |x: f64| (-x * x).exp());
        // erf(1) * sqrt(pi) / 2
        let exact = 0.746_824_132_812_427_4;
        assert!((val - exact).abs() < 1e-11, "{val}");
    }

    #[test]
    fn find_root_refines_to_tolerance() {
        let r = find_root(1.0, 2.0, 1e-14, |x| x * x - 2.0);
        assert!((r - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn tridiagonal_solves_match_direct_substitution() {
        // -x[i-1] + 4 x[i] - x[i+1] = rhs, n = 5, non-cyclic.
        let n = 5;
        let sub = vec![-1.0; n];
        let diag = vec![4.0; n];
        let sup = vec![-1.0; n];
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = 4.0 * x_true[i]
                - if i > 0 { x_true[i - 1] } else { 0.0 }
                - if i + 1 < n { x_true[i + 1] } else { 0.0 };
        }
        let x = solve_tridiagonal(&sub, &diag, &sup, &rhs);
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn cyclic_tridiagonal_solves_match_direct_substitution() {
        let n = 7;
        let sub = vec![1.0; n];
        let diag = vec![5.0; n];
        let sup = vec![2.0; n];
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = sub[i] * x_true[(i + n - 1) % n]
                + diag[i] * x_true[i]
                + sup[i] * x_true[(i + 1) % n];
        }
        let x = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs);
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn fit_line_recovers_slope_and_intercept() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let (m, b) = fit_line(&xs, &ys);
        assert!((m - 2.5).abs() < 1e-12);
        assert!((b + 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrapping_helpers() {
        assert!((wrap(7.0, 2.0) - 1.0).abs() < 1e-15);
        assert!((wrap(-0.5, 2.0) - 1.5).abs() < 1e-15);
        assert!((wrap_signed(1.9, 2.0) + 0.1).abs() < 1e-12);
        assert!((wrap_signed(0.9, 2.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_complement_spans_the_normal_space() {
        for t in [
            nalgebra::DVector::from_column_slice(&[3.0, -1.0]),
            nalgebra::DVector::from_column_slice(&[0.0, 1.0]),
            nalgebra::DVector::from_column_slice(&[0.2, -0.4, 1.7]),
        ] {
            let n = t.len();
            let basis = orthonormal_complement(&t);
            assert_eq!(basis.ncols(), n - 1);
            for j in 0..n - 1 {
                let col = basis.column(j);
                assert!(col.dot(&t).abs() < 1e-12);
                assert!((col.norm() - 1.0).abs() < 1e-12);
                for i in 0..j {
                    assert!(col.dot(&basis.column(i)).abs() < 1e-12);
                }
            }
        }
    }
}
