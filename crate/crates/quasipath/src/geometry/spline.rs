//! Periodic cubic spline interpolation of closed curves in R^n.
//!
//! The spline is stored in moment form: the second derivatives at the knots
//! solve a cyclic tridiagonal system, which is handled by a Sherman-Morrison
//! correction of the Thomas algorithm. Evaluation is C^2 across knots,
//! which is exactly the regularity the projection machinery needs.

use crate::error::{Error, Result};
use crate::numerics::{find_root, gauss16, solve_cyclic_tridiagonal, wrap};

/// Periodic cubic interpolant of `m` points in R^n with prescribed knots.
#[derive(Clone, Debug)]
pub struct PeriodicSpline {
    n: usize,
    m: usize,
    /// Knot positions t_0 < ... < t_{m-1}; the wrap segment closes at
    /// t_0 + period.
    knots: Vec<f64>,
    period: f64,
    /// Interpolated values, node-major: values[i*n + k].
    values: Vec<f64>,
    /// Second derivatives at knots, same layout.
    moments: Vec<f64>,
    /// Cumulative arc length at knots; cum[m] is the total length.
    cum_arc: Vec<f64>,
}

impl PeriodicSpline {
    /// Builds the spline through `values` (node-major, `m` nodes of dimension
    /// `n`) at the given knots. Knots must be strictly increasing and the
    /// wrap interval `t_0 + period - t_{m-1}` must be positive.
    pub fn new(knots: Vec<f64>, period: f64, values: Vec<f64>, n: usize) -> Result<Self> {
        let m = knots.len();
        if m < 3 {
            return Err(Error::DegenerateCurve(format!(
                "periodic spline needs at least 3 nodes, got {m}"
            )));
        }
        if values.len() != m * n {
            return Err(Error::InvalidParameter(format!(
                "value buffer holds {} floats, expected {}x{}",
                values.len(),
                m,
                n
            )));
        }
        if !(period > 0.0) {
            return Err(Error::DegenerateCurve("non-positive period".into()));
        }
        let mut h = vec![0.0; m];
        for i in 0..m {
            let next = if i + 1 < m { knots[i + 1] } else { knots[0] + period };
            h[i] = next - knots[i];
            if !(h[i] > 0.0) {
                return Err(Error::DegenerateCurve(format!(
                    "knots not strictly increasing at index {i}"
                )));
            }
        }

        // Cyclic tridiagonal system for the moments, one solve per
        // coordinate: h[i-1]/6 M[i-1] + (h[i-1]+h[i])/3 M[i] + h[i]/6 M[i+1]
        //   = dy[i]/h[i] - dy[i-1]/h[i-1].
        let mut sub = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut sup = vec![0.0; m];
        for i in 0..m {
            let hm = h[(i + m - 1) % m];
            sub[i] = hm / 6.0;
            diag[i] = (hm + h[i]) / 3.0;
            sup[i] = h[i] / 6.0;
        }
        let mut moments = vec![0.0; m * n];
        let mut rhs = vec![0.0; m];
        for k in 0..n {
            for i in 0..m {
                let prev = (i + m - 1) % m;
                let next = (i + 1) % m;
                let slope_fwd = (values[next * n + k] - values[i * n + k]) / h[i];
                let slope_bwd = (values[i * n + k] - values[prev * n + k]) / h[prev];
                rhs[i] = slope_fwd - slope_bwd;
            }
            let mk = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs);
            for i in 0..m {
                moments[i * n + k] = mk[i];
            }
        }

        let mut spline = PeriodicSpline {
            n,
            m,
            knots,
            period,
            values,
            moments,
            cum_arc: Vec::new(),
        };
        spline.cum_arc = spline.compute_cum_arc();
        Ok(spline)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn total_arc_length(&self) -> f64 {
        self.cum_arc[self.m]
    }

    /// Segment index whose knot interval contains the wrapped parameter, plus
    /// the wrapped parameter itself.
    fn locate(&self, t: f64) -> (usize, f64) {
        let tau = self.knots[0] + wrap(t - self.knots[0], self.period);
        // partition_point gives the first knot strictly greater than tau.
        let idx = self.knots.partition_point(|&k| k <= tau);
        let seg = if idx == 0 { 0 } else { idx - 1 };
        (seg.min(self.m - 1), tau)
    }

    #[inline]
    fn segment(&self, seg: usize) -> (f64, f64, usize, usize) {
        let t0 = self.knots[seg];
        let next = (seg + 1) % self.m;
        let t1 = if seg + 1 < self.m {
            self.knots[seg + 1]
        } else {
            self.knots[0] + self.period
        };
        (t0, t1, seg, next)
    }

    /// Value at parameter `t` written into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let (seg, tau) = self.locate(t);
        let (t0, t1, i, j) = self.segment(seg);
        let h = t1 - t0;
        let a = t1 - tau;
        let b = tau - t0;
        let wy0 = a / h;
        let wy1 = b / h;
        let wm0 = a * a * a / (6.0 * h) - h * a / 6.0;
        let wm1 = b * b * b / (6.0 * h) - h * b / 6.0;
        for k in 0..self.n {
            out[k] = wy0 * self.values[i * self.n + k]
                + wy1 * self.values[j * self.n + k]
                + wm0 * self.moments[i * self.n + k]
                + wm1 * self.moments[j * self.n + k];
        }
    }

    /// First derivative with respect to the parameter.
    pub fn deriv_into(&self, t: f64, out: &mut [f64]) {
        let (seg, tau) = self.locate(t);
        let (t0, t1, i, j) = self.segment(seg);
        let h = t1 - t0;
        let a = t1 - tau;
        let b = tau - t0;
        let cm0 = -a * a / (2.0 * h) + h / 6.0;
        let cm1 = b * b / (2.0 * h) - h / 6.0;
        for k in 0..self.n {
            let dy = (self.values[j * self.n + k] - self.values[i * self.n + k]) / h;
            out[k] = dy + cm0 * self.moments[i * self.n + k] + cm1 * self.moments[j * self.n + k];
        }
    }

    /// Second derivative with respect to the parameter (piecewise linear).
    pub fn second_into(&self, t: f64, out: &mut [f64]) {
        let (seg, tau) = self.locate(t);
        let (t0, t1, i, j) = self.segment(seg);
        let h = t1 - t0;
        let a = (t1 - tau) / h;
        let b = (tau - t0) / h;
        for k in 0..self.n {
            out[k] = a * self.moments[i * self.n + k] + b * self.moments[j * self.n + k];
        }
    }

    fn speed(&self, t: f64, buf: &mut [f64]) -> f64 {
        self.deriv_into(t, buf);
        buf.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn compute_cum_arc(&self) -> Vec<f64> {
        let mut buf = vec![0.0; self.n];
        let mut cum = Vec::with_capacity(self.m + 1);
        cum.push(0.0);
        let mut total = 0.0;
        for seg in 0..self.m {
            let (t0, t1, _, _) = self.segment(seg);
            // One subdivision as a cheap error check; GL16 on a half segment
            // of a smooth curve is exact to rounding, so the sum is trusted.
            let mid = 0.5 * (t0 + t1);
            let len = gauss16(t0, mid, |t| self.speed(t, &mut buf))
                + gauss16(mid, t1, |t| self.speed(t, &mut buf));
            total += len;
            cum.push(total);
        }
        cum
    }

    /// Parameter at which the arc length from `t_0` equals `s` (taken mod the
    /// total length).
    pub fn invert_arc_length(&self, s: f64) -> f64 {
        let total = self.total_arc_length();
        let s = wrap(s, total);
        // Last segment whose cumulative start is <= s.
        let idx = self.cum_arc.partition_point(|&c| c <= s);
        let seg = idx.saturating_sub(1).min(self.m - 1);
        let (t0, t1, _, _) = self.segment(seg);
        let local = s - self.cum_arc[seg];
        if local <= 0.0 {
            return t0;
        }
        let mut buf = vec![0.0; self.n];
        let mut buf2 = vec![0.0; self.n];
        let g = |tau: f64, b: &mut [f64], b2: &mut [f64]| -> f64 {
            let mid = 0.5 * (t0 + tau);
            gauss16(t0, mid, |t| {
                self.deriv_into(t, b);
                b.iter().map(|x| x * x).sum::<f64>().sqrt()
            }) + gauss16(mid, tau, |t| {
                self.deriv_into(t, b2);
                b2.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
        };
        find_root(t0, t1, 1e-13 * (t1 - t0).max(1.0), |tau| {
            g(tau, &mut buf, &mut buf2) - local
        })
    }

    /// Resamples `count` points at equal arc length spacing, starting at the
    /// arc position `s0`. Returns the flat node-major buffer.
    pub fn resample_equal_arc(&self, count: usize, s0: f64) -> Vec<f64> {
        let total = self.total_arc_length();
        let mut out = vec![0.0; count * self.n];
        let mut buf = vec![0.0; self.n];
        for j in 0..count {
            let s = s0 + total * j as f64 / count as f64;
            let tau = self.invert_arc_length(s);
            self.eval_into(tau, &mut buf);
            out[j * self.n..(j + 1) * self.n].copy_from_slice(&buf);
        }
        out
    }
}
