//! System definitions: the potential V, the perturbation field G, their
//! derivatives, the curve of stationary points, and the normal spectral gap.
//!
//! A system is a bundle of pure evaluators over points in R^n. Analytic
//! derivatives are wired where known; anything missing falls back to
//! central finite differences with step 1e-5*(1+|x|). Three benchmark
//! families with closed-form answers are built in.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::DiscretizedCurve;
use crate::numerics::orthonormal_complement;

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VecFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type MatFn = dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync;
/// Third derivative of V: `out[k]` receives the matrix of partials
/// d^3 V / dx_k dx_i dx_j.
type TensFn = dyn Fn(&[f64], &mut [DMatrix<f64>]) + Send + Sync;

/// Default bound under which the curve counts as stationary.
pub const TOL_STATIONARY: f64 = 1e-8;

fn fd_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-5 * (1.0 + norm)
}

/// A dynamical system dX = (-grad V + delta G) dt with a closed curve of
/// stationary points of V on which V vanishes.
pub struct SystemModel {
    name: String,
    n: usize,
    v: Box<ScalarFn>,
    grad_v: Box<VecFn>,
    hess_v: Option<Box<MatFn>>,
    d3v: Option<Box<TensFn>>,
    g: Box<VecFn>,
    dg: Option<Box<MatFn>>,
    curve: DiscretizedCurve,
    lambda: Option<f64>,
    tol_stationary: f64,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        curve: DiscretizedCurve,
        v: Box<ScalarFn>,
        grad_v: Box<VecFn>,
        g: Box<VecFn>,
    ) -> Self {
        let n = curve.dim();
        SystemModel {
            name: name.into(),
            n,
            v,
            grad_v,
            hess_v: None,
            d3v: None,
            g,
            dg: None,
            curve,
            lambda: None,
            tol_stationary: TOL_STATIONARY,
        }
    }

    pub fn with_hessian(mut self, f: Box<MatFn>) -> Self {
        self.hess_v = Some(f);
        self
    }

    pub fn with_third_derivative(mut self, f: Box<TensFn>) -> Self {
        self.d3v = Some(f);
        self
    }

    pub fn with_g_jacobian(mut self, f: Box<MatFn>) -> Self {
        self.dg = Some(f);
        self
    }

    pub fn with_tol_stationary(mut self, tol: f64) -> Self {
        self.tol_stationary = tol;
        self
    }

    /// Computes and stores the normal spectral gap; fails if the curve is
    /// not normally attracting.
    pub fn compute_spectral_gap(mut self) -> Result<Self> {
        let lambda = spectral_gap_estimate(&self)?;
        self.lambda = Some(lambda);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn stationary_curve(&self) -> &DiscretizedCurve {
        &self.curve
    }

    pub fn tol_stationary(&self) -> f64 {
        self.tol_stationary
    }

    /// Normal spectral gap. Only available after
    /// [`Self::compute_spectral_gap`]; built-in systems always have it.
    pub fn lambda(&self) -> f64 {
        self.lambda
            .expect("spectral gap not computed for this system")
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        (self.v)(x)
    }

    pub fn grad_v_into(&self, x: &[f64], out: &mut [f64]) {
        (self.grad_v)(x, out)
    }

    pub fn g_into(&self, x: &[f64], out: &mut [f64]) {
        (self.g)(x, out)
    }

    /// Drift of the perturbed system, -grad V + delta*G.
    pub fn drift_into(&self, x: &[f64], delta: f64, out: &mut [f64]) {
        let n = self.n;
        let mut g = vec![0.0; n];
        (self.grad_v)(x, out);
        (self.g)(x, &mut g);
        for k in 0..n {
            out[k] = -out[k] + delta * g[k];
        }
    }

    pub fn hess_v_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        match &self.hess_v {
            Some(f) => f(x, out),
            None => self.fd_hess_v(x, out),
        }
    }

    fn fd_hess_v(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let n = self.n;
        let h = fd_step(x);
        let mut xp = x.to_vec();
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for j in 0..n {
            xp[j] = x[j] + h;
            (self.grad_v)(&xp, &mut gp);
            xp[j] = x[j] - h;
            (self.grad_v)(&xp, &mut gm);
            xp[j] = x[j];
            for i in 0..n {
                out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        // Exact Hessians are symmetric; the finite-difference one is only
        // nearly so.
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
    }

    pub fn d3v_into(&self, x: &[f64], out: &mut [DMatrix<f64>]) {
        match &self.d3v {
            Some(f) => f(x, out),
            None => {
                let n = self.n;
                let h = fd_step(x);
                let mut xp = x.to_vec();
                let mut hp = DMatrix::zeros(n, n);
                let mut hm = DMatrix::zeros(n, n);
                for k in 0..n {
                    xp[k] = x[k] + h;
                    self.hess_v_into(&xp, &mut hp);
                    xp[k] = x[k] - h;
                    self.hess_v_into(&xp, &mut hm);
                    xp[k] = x[k];
                    for i in 0..n {
                        for j in 0..n {
                            out[k][(i, j)] = (hp[(i, j)] - hm[(i, j)]) / (2.0 * h);
                        }
                    }
                }
            }
        }
    }

    pub fn dg_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        match &self.dg {
            Some(f) => f(x, out),
            None => {
                let n = self.n;
                let h = fd_step(x);
                let mut xp = x.to_vec();
                let mut gp = vec![0.0; n];
                let mut gm = vec![0.0; n];
                for j in 0..n {
                    xp[j] = x[j] + h;
                    (self.g)(&xp, &mut gp);
                    xp[j] = x[j] - h;
                    (self.g)(&xp, &mut gm);
                    xp[j] = x[j];
                    for i in 0..n {
                        out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
                    }
                }
            }
        }
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hess_v.is_some()
    }

    pub fn has_analytic_d3v(&self) -> bool {
        self.d3v.is_some()
    }

    pub fn has_analytic_dg(&self) -> bool {
        self.dg.is_some()
    }

    /// Forces finite-difference fallbacks, keeping everything else; used to
    /// cross-check analytic derivatives.
    pub fn without_analytic_third_derivative(mut self) -> Self {
        self.d3v = None;
        self
    }
}

/// The built-in benchmark systems.
///
/// `ring`: V = (x^2+y^2-1)^2/4 with the unit circle stationary,
/// G = (-xy + kappa*x, x^2 + kappa*y). `ring3d` adds a z-well and a
/// z-coupling: V += z^2/2, G gains (-z + beta*x). `ellipse(a, alpha)`:
/// V = (x^2/a^2 + y^2 - 1)^2/4, G = (-y + alpha*x^2, x).
#[derive(Clone, Debug, PartialEq)]
pub enum BuiltinSystem {
    Ring { kappa: f64 },
    Ring3d { kappa: f64, beta: f64 },
    Ellipse { a: f64, alpha: f64 },
}

/// Nodes stored for the analytic circles of the ring systems.
const RING_NODES: usize = 512;
/// Nodes for the ellipse curve; its spline needs this resolution for the
/// tangent-curvature orthogonality tolerance.
const ELLIPSE_NODES: usize = 4096;

pub fn make_builtin(spec: &BuiltinSystem) -> Result<SystemModel> {
    match spec {
        BuiltinSystem::Ring { kappa } => {
            if !kappa.is_finite() {
                return Err(Error::InvalidParameter("ring kappa must be finite".into()));
            }
            let kappa = *kappa;
            let curve = DiscretizedCurve::circle(
                &DVector::from_column_slice(&[0.0, 0.0]),
                1.0,
                &DVector::from_column_slice(&[1.0, 0.0]),
                &DVector::from_column_slice(&[0.0, 1.0]),
                RING_NODES,
            )?;
            let v = Box::new(|x: &[f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                0.25 * (r2 - 1.0) * (r2 - 1.0)
            });
            let grad_v = Box::new(|x: &[f64], out: &mut [f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                out[0] = (r2 - 1.0) * x[0];
                out[1] = (r2 - 1.0) * x[1];
            });
            let hess = Box::new(|x: &[f64], out: &mut DMatrix<f64>| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                out[(0, 0)] = r2 - 1.0 + 2.0 * x[0] * x[0];
                out[(0, 1)] = 2.0 * x[0] * x[1];
                out[(1, 0)] = 2.0 * x[0] * x[1];
                out[(1, 1)] = r2 - 1.0 + 2.0 * x[1] * x[1];
            });
            let d3 = Box::new(|x: &[f64], out: &mut [DMatrix<f64>]| {
                for k in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let mut t = 0.0;
                            if i == j {
                                t += 2.0 * x[k];
                            }
                            if i == k {
                                t += 2.0 * x[j];
                            }
                            if j == k {
                                t += 2.0 * x[i];
                            }
                            out[k][(i, j)] = t;
                        }
                    }
                }
            });
            let g = Box::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = -x[0] * x[1] + kappa * x[0];
                out[1] = x[0] * x[0] + kappa * x[1];
            });
            let dg = Box::new(move |x: &[f64], out: &mut DMatrix<f64>| {
                out[(0, 0)] = -x[1] + kappa;
                out[(0, 1)] = -x[0];
                out[(1, 0)] = 2.0 * x[0];
                out[(1, 1)] = kappa;
            });
            SystemModel::new("ring", curve, v, grad_v, g)
                .with_hessian(hess)
                .with_third_derivative(d3)
                .with_g_jacobian(dg)
                .compute_spectral_gap()
        }
        BuiltinSystem::Ring3d { kappa, beta } => {
            if !kappa.is_finite() || !beta.is_finite() {
                return Err(Error::InvalidParameter(
                    "ring3d parameters must be finite".into(),
                ));
            }
            let kappa = *kappa;
            let beta = *beta;
            let curve = DiscretizedCurve::circle(
                &DVector::from_column_slice(&[0.0, 0.0, 0.0]),
                1.0,
                &DVector::from_column_slice(&[1.0, 0.0, 0.0]),
                &DVector::from_column_slice(&[0.0, 1.0, 0.0]),
                RING_NODES,
            )?;
            let v = Box::new(|x: &[f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                0.25 * (r2 - 1.0) * (r2 - 1.0) + 0.5 * x[2] * x[2]
            });
            let grad_v = Box::new(|x: &[f64], out: &mut [f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                out[0] = (r2 - 1.0) * x[0];
                out[1] = (r2 - 1.0) * x[1];
                out[2] = x[2];
            });
            let hess = Box::new(|x: &[f64], out: &mut DMatrix<f64>| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                out.fill(0.0);
                out[(0, 0)] = r2 - 1.0 + 2.0 * x[0] * x[0];
                out[(0, 1)] = 2.0 * x[0] * x[1];
                out[(1, 0)] = 2.0 * x[0] * x[1];
                out[(1, 1)] = r2 - 1.0 + 2.0 * x[1] * x[1];
                out[(2, 2)] = 1.0;
            });
            let d3 = Box::new(|x: &[f64], out: &mut [DMatrix<f64>]| {
                for k in 0..3 {
                    out[k].fill(0.0);
                }
                for k in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let mut t = 0.0;
                            if i == j {
                                t += 2.0 * x[k];
                            }
                            if i == k {
                                t += 2.0 * x[j];
                            }
                            if j == k {
                                t += 2.0 * x[i];
                            }
                            out[k][(i, j)] = t;
                        }
                    }
                }
            });
            let g = Box::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = -x[0] * x[1] + kappa * x[0];
                out[1] = x[0] * x[0] + kappa * x[1];
                out[2] = -x[2] + beta * x[0];
            });
            let dg = Box::new(move |x: &[f64], out: &mut DMatrix<f64>| {
                out.fill(0.0);
                out[(0, 0)] = -x[1] + kappa;
                out[(0, 1)] = -x[0];
                out[(1, 0)] = 2.0 * x[0];
                out[(1, 1)] = kappa;
                out[(2, 0)] = beta;
                out[(2, 2)] = -1.0;
            });
            SystemModel::new("ring3d", curve, v, grad_v, g)
                .with_hessian(hess)
                .with_third_derivative(d3)
                .with_g_jacobian(dg)
                .compute_spectral_gap()
        }
        BuiltinSystem::Ellipse { a, alpha } => {
            if !a.is_finite() || !alpha.is_finite() || *a <= 0.0 {
                return Err(Error::InvalidParameter(
                    "ellipse needs finite parameters and a > 0".into(),
                ));
            }
            let a = *a;
            let alpha = *alpha;
            let curve = ellipse_curve(a)?;
            let a2 = a * a;
            let v = Box::new(move |x: &[f64]| {
                let c = x[0] * x[0] / a2 + x[1] * x[1] - 1.0;
                0.25 * c * c
            });
            let grad_v = Box::new(move |x: &[f64], out: &mut [f64]| {
                let c = x[0] * x[0] / a2 + x[1] * x[1] - 1.0;
                out[0] = c * x[0] / a2;
                out[1] = c * x[1];
            });
            let hess = Box::new(move |x: &[f64], out: &mut DMatrix<f64>| {
                let c = x[0] * x[0] / a2 + x[1] * x[1] - 1.0;
                let w0 = 2.0 * x[0] / a2;
                let w1 = 2.0 * x[1];
                out[(0, 0)] = 0.5 * w0 * w0 + c / a2;
                out[(0, 1)] = 0.5 * w0 * w1;
                out[(1, 0)] = 0.5 * w0 * w1;
                out[(1, 1)] = 0.5 * w1 * w1 + c;
            });
            let d3 = Box::new(move |x: &[f64], out: &mut [DMatrix<f64>]| {
                // V = c^2/4 with c quadratic: d3V_kij = (cc_ik w_j + w_i
                // cc_jk + w_k cc_ij)/2 where w = grad c, cc = hess c.
                let w = [2.0 * x[0] / a2, 2.0 * x[1]];
                let cc = [2.0 / a2, 2.0];
                for k in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let mut t = 0.0;
                            if i == k {
                                t += cc[i] * w[j];
                            }
                            if j == k {
                                t += w[i] * cc[j];
                            }
                            if i == j {
                                t += w[k] * cc[i];
                            }
                            out[k][(i, j)] = 0.5 * t;
                        }
                    }
                }
            });
            let g = Box::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = -x[1] + alpha * x[0] * x[0];
                out[1] = x[0];
            });
            let dg = Box::new(move |x: &[f64], out: &mut DMatrix<f64>| {
                out[(0, 0)] = 2.0 * alpha * x[0];
                out[(0, 1)] = -1.0;
                out[(1, 0)] = 1.0;
                out[(1, 1)] = 0.0;
            });
            SystemModel::new("ellipse", curve, v, grad_v, g)
                .with_hessian(hess)
                .with_third_derivative(d3)
                .with_g_jacobian(dg)
                .compute_spectral_gap()
        }
    }
}

/// Stationary curve of the ellipse system: x^2/a^2 + y^2 = 1, discretized
/// at exact equal-arc nodes (cumulative arc length by quadrature, node
/// placement by root finding).
fn ellipse_curve(a: f64) -> Result<DiscretizedCurve> {
    if (a - 1.0).abs() < 1e-14 {
        // Degenerates to the unit circle; keep the closed form.
        return DiscretizedCurve::circle(
            &DVector::from_column_slice(&[0.0, 0.0]),
            1.0,
            &DVector::from_column_slice(&[1.0, 0.0]),
            &DVector::from_column_slice(&[0.0, 1.0]),
            RING_NODES,
        );
    }
    let m = ELLIPSE_NODES;
    let speed = |t: f64| -> f64 {
        let s = t.sin();
        let c = t.cos();
        (a * a * s * s + c * c).sqrt()
    };
    // Cumulative arc length over a fine parameter grid, one quadrature
    // panel per cell.
    let fine = 4 * m;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut cum = vec![0.0; fine + 1];
    for i in 0..fine {
        let t0 = two_pi * i as f64 / fine as f64;
        let t1 = two_pi * (i + 1) as f64 / fine as f64;
        cum[i + 1] = cum[i] + crate::numerics::gauss16(t0, t1, speed);
    }
    let total = cum[fine];
    let mut points = Vec::with_capacity(m);
    for j in 0..m {
        let target = total * j as f64 / m as f64;
        let cell = match cum.binary_search_by(|c| c.partial_cmp(&target).unwrap()) {
            Ok(i) => i.min(fine - 1),
            Err(i) => i.saturating_sub(1).min(fine - 1),
        };
        let t0 = two_pi * cell as f64 / fine as f64;
        let t1 = two_pi * (cell + 1) as f64 / fine as f64;
        let t = if target <= cum[cell] {
            t0
        } else {
            crate::numerics::find_root(t0, t1, 1e-15 * total, |t| {
                cum[cell] + crate::numerics::gauss16(t0, t, speed) - target
            })
        };
        points.push(DVector::from_column_slice(&[a * t.cos(), t.sin()]));
    }
    DiscretizedCurve::from_equal_arc_nodes(&points, total)
}

/// Suprema over curve nodes of the stationarity defects.
#[derive(Clone, Copy, Debug)]
pub struct StationaryReport {
    pub max_grad: f64,
    pub max_tangent_hess: f64,
    pub max_v: f64,
    pub pass: bool,
}

/// Checks that the stored curve is a curve of stationary points: gradient,
/// tangential Hessian action, and V itself all vanish on it up to `tol`.
pub fn verify_stationary_curve(sys: &SystemModel, tol: f64) -> StationaryReport {
    let n = sys.dim();
    let curve = sys.stationary_curve();
    let mut grad = vec![0.0; n];
    let mut tang = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    let mut max_grad = 0.0f64;
    let mut max_tangent_hess = 0.0f64;
    let mut max_v = 0.0f64;
    for i in 0..curve.node_count() {
        let phase = curve.node_phase(i);
        let x = curve.point(phase);
        let xs = x.as_slice();
        sys.grad_v_into(xs, &mut grad);
        max_grad = max_grad.max(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        max_v = max_v.max(sys.v(xs).abs());
        sys.hess_v_into(xs, &mut hess);
        curve.tangent_into(phase, &mut tang);
        let ht = &hess * DVector::from_column_slice(&tang);
        max_tangent_hess = max_tangent_hess.max(ht.norm());
    }
    StationaryReport {
        max_grad,
        max_tangent_hess,
        max_v,
        pass: max_grad <= tol && max_tangent_hess <= tol && max_v <= tol,
    }
}

/// Smallest eigenvalue of the Hessian restricted to the normal space,
/// minimized over curve nodes. Fails if the curve is not normally
/// attracting.
pub fn spectral_gap_estimate(sys: &SystemModel) -> Result<f64> {
    let n = sys.dim();
    let curve = sys.stationary_curve();
    let mut tang = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    let mut lambda = f64::INFINITY;
    for i in 0..curve.node_count() {
        let phase = curve.node_phase(i);
        let x = curve.point(phase);
        sys.hess_v_into(x.as_slice(), &mut hess);
        curve.tangent_into(phase, &mut tang);
        let basis = orthonormal_complement(&DVector::from_column_slice(&tang));
        let reduced = basis.transpose() * &hess * &basis;
        let sym = nalgebra::SymmetricEigen::new(reduced);
        for ev in sym.eigenvalues.iter() {
            lambda = lambda.min(*ev);
        }
    }
    if !(lambda > sys.tol_stationary()) {
        return Err(Error::NonHyperbolic(format!(
            "normal Hessian spectral gap {lambda:.3e} is not positive"
        )));
    }
    Ok(lambda)
}
