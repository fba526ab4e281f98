//! Invariant curve of the perturbed flow and the scalar drifts it induces
//! on the phase circle.
//!
//! For drift `-grad V + delta G`, with a closed curve `M` of stationary
//! points of `V` that is normally attracting, an invariant attracting curve
//! `M^delta` survives at normal distance `O(delta)`. This module computes it
//! by relaxing a first-order guess under the flow, records the normal offset
//! `phi_delta(theta)` against the base parametrization, and tabulates the
//! scalar drifts consumed by the phase reduction: `b` (first order, on `M`),
//! `b_delta` (exact, in the arc length of `M^delta`), and `b_tilde` (exact,
//! pulled back to the base phase).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{DiscretizedCurve, PeriodicSpline};
use crate::model::SystemModel;
use crate::numerics::{find_root, orthonormal_complement, wrap, wrap_signed};

/// Scalar periodic interpolant over uniform knots; thin wrapper so drift
/// tables can be evaluated off-node.
#[derive(Clone, Debug)]
struct ScalarTable {
    spline: PeriodicSpline,
}

impl ScalarTable {
    fn new(values: Vec<f64>, period: f64) -> Result<Self> {
        let m = values.len();
        let knots: Vec<f64> = (0..m).map(|j| period * j as f64 / m as f64).collect();
        Ok(ScalarTable {
            spline: PeriodicSpline::new(knots, period, values, 1)?,
        })
    }

    fn eval(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.spline.eval_into(x, &mut out);
        out[0]
    }

    fn deriv(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.spline.deriv_into(x, &mut out);
        out[0]
    }
}

/// Knobs for `relax_to_invariant_curve`.
#[derive(Clone, Debug)]
pub struct RelaxOptions {
    /// Node count of the relaxed curve.
    pub nodes: usize,
    /// Convergence tolerance relative to `delta`: relaxation stops when the
    /// normal component of the drift at every node falls below `tol * delta`
    /// (plus a small absolute floor so tiny `delta` remains reachable).
    pub tol: f64,
    /// Cap on flow steps before giving up.
    pub max_iters: usize,
    /// Flow step; `None` picks `0.1 / lambda`.
    pub dt: Option<f64>,
    /// Refit the curve and respread its nodes every this many flow steps.
    pub redistribute_every: usize,
    /// Largest admissible perturbation strength.
    pub delta_max: f64,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        RelaxOptions {
            nodes: 1024,
            tol: 1e-6,
            max_iters: 50_000,
            dt: None,
            redistribute_every: 10,
            delta_max: 0.5,
        }
    }
}

/// Fixed point data of the reduced phase drift.
#[derive(Clone, Debug)]
pub struct StablePhase {
    /// Stable zero of `b` on the base phase circle.
    pub theta0: f64,
    /// Stable zero of `b_delta` on the phase circle of the invariant curve,
    /// the one nearest to the image of `theta0`.
    pub phi_a: f64,
    /// Unwrapped interval `(lo, hi)` containing `phi_a`, bounded by the
    /// adjacent unstable zeros of `b_delta`; reduced trajectories started
    /// inside converge to `phi_a`.
    pub attraction: (f64, f64),
}

/// Contraction and stretch rates measured along trajectories started on the
/// invariant curve.
#[derive(Clone, Debug)]
pub struct LyapunovReport {
    /// Largest normal expansion rate over the sampled trajectories; negative
    /// means the curve attracts.
    pub nu_rate: f64,
    /// Largest tangential stretch rate.
    pub tangential_rate: f64,
    /// Tangential growth relative to normal decay; below 1 the curve is
    /// normally hyperbolic with a smooth persistence regime.
    pub sigma_estimate: f64,
}

/// The invariant curve `M^delta` together with its offset from the base
/// curve and the tabulated reduced drifts.
///
/// Invariants: `offset_row(j)` is orthogonal to the base tangent at node `j`
/// up to solver tolerance; `base.point(theta_j) + offset_row(j)` lies on
/// `curve_delta` at phase `psi_at_node(j)`; the tabulated drifts agree with
/// direct evaluation of `<drift, unit tangent>` at the table nodes.
#[derive(Clone, Debug)]
pub struct PerturbedManifold {
    base: DiscretizedCurve,
    curve_delta: DiscretizedCurve,
    delta: f64,
    /// Normal offset at each base node, node-major `m_base x n`.
    offsets: Vec<f64>,
    /// First-order correction `h^1` at each base node, node-major.
    h1: Vec<f64>,
    /// Unwrapped phase on `curve_delta` of the offset point over each base
    /// node; increasing, `psi[0] in [0, L_delta)`.
    psi: Vec<f64>,
    /// Periodic part of `theta -> psi(theta)`.
    phase_shift: ScalarTable,
    b: ScalarTable,
    b_delta: ScalarTable,
    b_tilde: ScalarTable,
    stable: Option<StablePhase>,
    residual: f64,
    iterations: usize,
}

impl PerturbedManifold {
    pub fn base(&self) -> &DiscretizedCurve {
        &self.base
    }

    pub fn curve_delta(&self) -> &DiscretizedCurve {
        &self.curve_delta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Final sup over nodes of the normal drift component.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Flow steps spent in the relaxation.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Normal offset `phi_delta` at base node `j`.
    pub fn offset_row(&self, j: usize) -> &[f64] {
        let n = self.base.dim();
        &self.offsets[j * n..(j + 1) * n]
    }

    /// First-order correction `h^1` at base node `j`.
    pub fn h1_row(&self, j: usize) -> &[f64] {
        let n = self.base.dim();
        &self.h1[j * n..(j + 1) * n]
    }

    /// `sup_theta |phi_delta(theta)|` over the base nodes.
    pub fn offset_sup(&self) -> f64 {
        let n = self.base.dim();
        let mut best = 0.0f64;
        for j in 0..self.base.node_count() {
            let row = &self.offsets[j * n..(j + 1) * n];
            best = best.max(row.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        best
    }

    /// Phase on `curve_delta` of the offset point over base node `j`,
    /// wrapped to `[0, L_delta)`.
    pub fn psi_at_node(&self, j: usize) -> f64 {
        wrap(self.psi[j], self.curve_delta.length())
    }

    /// The phase map `theta -> phi`: where the point of `M^delta` sitting
    /// over base phase `theta` lands in the arc length of `M^delta`.
    pub fn phi_of_theta(&self, theta: f64) -> f64 {
        let ratio = self.curve_delta.length() / self.base.length();
        wrap(self.phase_shift.eval(theta) + ratio * theta, self.curve_delta.length())
    }

    /// First-order reduced drift `b(theta) = delta <G(q), q'>` on the base
    /// curve.
    pub fn b(&self, theta: f64) -> f64 {
        self.b.eval(theta)
    }

    pub fn b_deriv(&self, theta: f64) -> f64 {
        self.b.deriv(theta)
    }

    /// Exact reduced drift on `M^delta` in its own arc length.
    pub fn b_delta(&self, phi: f64) -> f64 {
        self.b_delta.eval(phi)
    }

    pub fn b_delta_deriv(&self, phi: f64) -> f64 {
        self.b_delta.deriv(phi)
    }

    /// Exact reduced drift pulled back to the base phase: the tangential
    /// drift component at the point of `M^delta` over base phase `theta`.
    pub fn b_tilde(&self, theta: f64) -> f64 {
        self.b_tilde.eval(theta)
    }

    /// Stable fixed point of the reduced drift, if one exists.
    pub fn stable_phase(&self) -> Result<&StablePhase> {
        self.stable.as_ref().ok_or(Error::NoStableFixedPoint)
    }
}

/// Leading-order normal displacement of the invariant curve at base phase
/// `theta`: solves `(N^T H N) y = N^T G` in the normal space and lifts the
/// result back to ambient coordinates.
pub fn first_order_correction(sys: &SystemModel, theta: f64) -> Result<DVector<f64>> {
    let curve = sys.stationary_curve();
    let n = curve.dim();
    let q = curve.point(theta);
    let mut t = curve.tangent(theta);
    t /= t.norm();
    let basis = orthonormal_complement(&t);
    let mut hess = DMatrix::zeros(n, n);
    sys.hess_v_into(q.as_slice(), &mut hess);
    let a = basis.transpose() * &hess * &basis;
    let a = (&a + &a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| l.abs() <= 1e-10) {
        return Err(Error::NonHyperbolic(format!(
            "normal Hessian is singular at phase {theta:.6}"
        )));
    }
    let mut g = DVector::zeros(n);
    sys.g_into(q.as_slice(), g.as_mut_slice());
    // N^T (G - <G,t>t) = N^T G because the columns of N are orthogonal to t.
    let rhs = eig.eigenvectors.transpose() * basis.transpose() * &g;
    let scaled = DVector::from_iterator(n - 1, rhs.iter().zip(eig.eigenvalues.iter()).map(|(r, l)| r / l));
    Ok(basis * (eig.eigenvectors * scaled))
}

/// One RK4 step of the node flow `dz/dt = -grad V(z) + delta G(z)` applied
/// to every node in the flat array.
fn rk4_flow_step(sys: &SystemModel, delta: f64, dt: f64, flat: &mut [f64], n: usize) {
    let m = flat.len() / n;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    for j in 0..m {
        let z = &mut flat[j * n..(j + 1) * n];
        sys.drift_into(z, delta, &mut k1);
        for k in 0..n {
            stage[k] = z[k] + 0.5 * dt * k1[k];
        }
        sys.drift_into(&stage, delta, &mut k2);
        for k in 0..n {
            stage[k] = z[k] + 0.5 * dt * k2[k];
        }
        sys.drift_into(&stage, delta, &mut k3);
        for k in 0..n {
            stage[k] = z[k] + dt * k3[k];
        }
        sys.drift_into(&stage, delta, &mut k4);
        for k in 0..n {
            z[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
    }
}

/// Sup over nodes of the drift component normal to the curve. Tangential
/// drift only reparametrizes the curve, so this is the invariance defect.
fn normal_residual(sys: &SystemModel, delta: f64, curve: &DiscretizedCurve) -> f64 {
    let n = curve.dim();
    let mut drift = vec![0.0; n];
    let mut tan = vec![0.0; n];
    let mut worst = 0.0f64;
    for j in 0..curve.node_count() {
        let node = curve.node(j);
        sys.drift_into(node.as_slice(), delta, &mut drift);
        curve.tangent_into(curve.node_phase(j), &mut tan);
        let t2: f64 = tan.iter().map(|x| x * x).sum();
        let dot: f64 = drift.iter().zip(tan.iter()).map(|(a, b)| a * b).sum();
        let c = dot / t2;
        let mut s = 0.0;
        for k in 0..n {
            let r = drift[k] - c * tan[k];
            s += r * r;
        }
        worst = worst.max(s.sqrt());
    }
    worst
}

/// Relax the first-order guess `q + delta h^1` under the perturbed flow
/// until the curve is invariant to tolerance, then assemble the offset and
/// drift tables.
pub fn relax_to_invariant_curve(
    sys: &SystemModel,
    delta: f64,
    opts: &RelaxOptions,
) -> Result<PerturbedManifold> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "perturbation strength must be finite and >= 0, got {delta}"
        )));
    }
    if delta > opts.delta_max {
        return Err(Error::InvalidParameter(format!(
            "perturbation strength {delta} exceeds the configured maximum {}",
            opts.delta_max
        )));
    }
    let base = sys.stationary_curve();
    let n = base.dim();
    let m = opts.nodes.max(128);
    let lambda = sys.lambda();
    let dt = opts.dt.unwrap_or(0.1 / lambda);

    // The unperturbed curve is invariant by definition; keep its
    // representation (exact for circles) and skip the relaxation.
    if delta == 0.0 {
        let curve = base.with_node_count(m)?;
        let resid = normal_residual(sys, 0.0, &curve);
        return assemble(sys, 0.0, base.clone(), curve, resid, 0, true);
    }

    // First-order guess on the relaxation grid.
    let mut flat0 = vec![0.0; m * n];
    let mut h1_sup = 0.0f64;
    for j in 0..m {
        let theta = base.length() * j as f64 / m as f64;
        let q = base.point(theta);
        let h1 = first_order_correction(sys, theta)?;
        h1_sup = h1_sup.max(h1.norm());
        for k in 0..n {
            flat0[j * n + k] = q[k] + delta * h1[k];
        }
    }

    let mut curve = if delta * h1_sup <= 1e-14 {
        // The guess coincides with the base curve; reuse its representation
        // so circles stay exact.
        base.with_node_count(m)?
    } else {
        DiscretizedCurve::arc_length_from_flat(n, flat0)?
    };

    let escape_radius = 0.9 * base.injectivity_radius();
    let target = opts.tol * delta + 1e-13;
    let mut resid = normal_residual(sys, delta, &curve);
    let mut steps = 0usize;

    while resid > target {
        if steps >= opts.max_iters {
            return Err(Error::NoConvergence {
                what: "invariant curve relaxation",
                iters: steps,
                residual: resid,
            });
        }
        let burst = opts.redistribute_every.min(opts.max_iters - steps).max(1);
        let mut flat = curve.nodes_flat().to_vec();
        for _ in 0..burst {
            rk4_flow_step(sys, delta, dt, &mut flat, n);
        }
        steps += burst;
        curve = DiscretizedCurve::arc_length_from_flat(n, flat)?;
        for j in 0..curve.node_count() {
            match base.project(&curve.node(j)) {
                Ok(p) if p.distance <= escape_radius => {}
                _ => {
                    return Err(Error::ManifoldEscaped(format!(
                        "node left the tube of radius {escape_radius:.3} around the base curve after {steps} steps"
                    )));
                }
            }
        }
        resid = normal_residual(sys, delta, &curve);
    }

    assemble(sys, delta, base.clone(), curve, resid, steps, false)
}

/// Build the offset, phase map, and drift tables once the invariant curve
/// is known. `trivial` marks the unperturbed case where the offset is zero
/// by construction.
fn assemble(
    sys: &SystemModel,
    delta: f64,
    base: DiscretizedCurve,
    curve: DiscretizedCurve,
    residual: f64,
    iterations: usize,
    trivial: bool,
) -> Result<PerturbedManifold> {
    let n = base.dim();
    let m_base = base.node_count();
    let len = base.length();
    let len_d = curve.length();
    let h_d = len_d / curve.node_count() as f64;

    let mut offsets = vec![0.0; m_base * n];
    let mut h1 = vec![0.0; m_base * n];
    let mut psi = vec![0.0; m_base];

    let mut point = vec![0.0; n];
    for j in 0..m_base {
        let theta = base.node_phase(j);
        let corr = first_order_correction(sys, theta)?;
        h1[j * n..(j + 1) * n].copy_from_slice(corr.as_slice());
        if trivial {
            psi[j] = theta * len_d / len;
            continue;
        }
        let q = base.node(j);
        let mut t = base.tangent(theta);
        t /= t.norm();
        // Phase on the invariant curve whose point sits orthogonally over
        // this base node. Track the previous node's solution; fall back to
        // nearest-point projection for the first node.
        let guess = if j == 0 {
            curve.project(&q)?.phase
        } else {
            psi[j - 1] + len_d / m_base as f64
        };
        let f = |p: f64, point: &mut [f64]| -> f64 {
            curve.point_into(wrap(p, len_d), point);
            (0..n).map(|k| (point[k] - q[k]) * t[k]).sum()
        };
        let mut root = None;
        for widen in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            let lo = guess - widen * h_d;
            let hi = guess + widen * h_d;
            if f(lo, &mut point) * f(hi, &mut point) <= 0.0 {
                root = Some(find_root(lo, hi, 1e-13, |p| f(p, &mut point)));
                break;
            }
        }
        let root = root.ok_or_else(|| Error::OutsideNeighborhood {
            point: q.as_slice().to_vec(),
        })?;
        psi[j] = if j == 0 {
            wrap(root, len_d)
        } else {
            // Unwrap against the expected advance of one node spacing; the
            // signed wrap tolerates feet that lag slightly behind.
            let expected = psi[j - 1] + len_d / m_base as f64;
            expected + wrap_signed(root - expected, len_d)
        };
        curve.point_into(wrap(psi[j], len_d), &mut point);
        for k in 0..n {
            offsets[j * n + k] = point[k] - q[k];
        }
    }

    // Periodic part of theta -> psi(theta).
    let ratio = len_d / len;
    let shift: Vec<f64> = (0..m_base)
        .map(|j| psi[j] - base.node_phase(j) * ratio)
        .collect();
    let phase_shift = ScalarTable::new(shift, len)?;

    // First-order drift on the base curve.
    let mut gbuf = vec![0.0; n];
    let mut tbuf = vec![0.0; n];
    let mut b_vals = vec![0.0; m_base];
    for j in 0..m_base {
        let q = base.node(j);
        sys.g_into(q.as_slice(), &mut gbuf);
        base.tangent_into(base.node_phase(j), &mut tbuf);
        let tn = tbuf.iter().map(|x| x * x).sum::<f64>().sqrt();
        b_vals[j] = delta * gbuf.iter().zip(tbuf.iter()).map(|(a, b)| a * b).sum::<f64>() / tn;
    }
    let b = ScalarTable::new(b_vals.clone(), len)?;

    // Exact drift in the arc length of the invariant curve.
    let m_d = curve.node_count();
    let mut drift = vec![0.0; n];
    let mut bd_vals = vec![0.0; m_d];
    for i in 0..m_d {
        let z = curve.node(i);
        sys.drift_into(z.as_slice(), delta, &mut drift);
        curve.tangent_into(curve.node_phase(i), &mut tbuf);
        let tn = tbuf.iter().map(|x| x * x).sum::<f64>().sqrt();
        bd_vals[i] = drift.iter().zip(tbuf.iter()).map(|(a, b)| a * b).sum::<f64>() / tn;
    }
    let b_delta = ScalarTable::new(bd_vals, len_d)?;

    // Exact drift pulled back to the base phase: tangential component along
    // the offset curve theta -> q(theta) + phi_delta(theta).
    let mut bt_vals = vec![0.0; m_base];
    if trivial {
        for (j, v) in bt_vals.iter_mut().enumerate() {
            *v = b_vals[j];
        }
    } else {
        let mut qt_flat = vec![0.0; m_base * n];
        for j in 0..m_base {
            let q = base.node(j);
            for k in 0..n {
                qt_flat[j * n + k] = q[k] + offsets[j * n + k];
            }
        }
        let knots: Vec<f64> = (0..m_base).map(|j| base.node_phase(j)).collect();
        let qt = PeriodicSpline::new(knots, len, qt_flat.clone(), n)?;
        let mut dir = vec![0.0; n];
        for j in 0..m_base {
            qt.deriv_into(base.node_phase(j), &mut dir);
            let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let z = &qt_flat[j * n..(j + 1) * n];
            sys.drift_into(z, delta, &mut drift);
            bt_vals[j] = drift.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>() / dn;
        }
    }
    let b_tilde = ScalarTable::new(bt_vals, len)?;

    let stable = locate_stable_phase(&b, len, &b_delta, len_d, |theta| {
        let r = len_d / len;
        wrap(phase_shift.eval(theta) + r * theta, len_d)
    });

    Ok(PerturbedManifold {
        base,
        curve_delta: curve,
        delta,
        offsets,
        h1,
        psi,
        phase_shift,
        b,
        b_delta,
        b_tilde,
        stable,
        residual,
        iterations,
    })
}

/// All zeros of a periodic scalar table, as `(position, slope)` pairs.
fn table_zeros(table: &ScalarTable, period: f64, samples: usize) -> Vec<(f64, f64)> {
    let mut zeros: Vec<(f64, f64)> = Vec::new();
    let mut prev_x = 0.0;
    let mut prev_v = table.eval(0.0);
    for i in 1..=samples {
        let x = period * i as f64 / samples as f64;
        let v = table.eval(x);
        if prev_v * v < 0.0 || (prev_v == 0.0 && v != 0.0) {
            let root = if prev_v == 0.0 {
                prev_x
            } else {
                find_root(prev_x, x, 1e-12, |p| table.eval(p))
            };
            let root = wrap(root, period);
            if zeros
                .iter()
                .all(|(z, _)| wrap_signed(z - root, period).abs() > 1e-9)
            {
                zeros.push((root, table.deriv(root)));
            }
        }
        prev_x = x;
        prev_v = v;
    }
    zeros
}

/// Stable zero of `b`, its image on the invariant curve, and the basin of
/// the matching stable zero of `b_delta`. `None` when `b` never crosses
/// zero downward.
fn locate_stable_phase<F: Fn(f64) -> f64>(
    b: &ScalarTable,
    len: f64,
    b_delta: &ScalarTable,
    len_d: f64,
    phi_of_theta: F,
) -> Option<StablePhase> {
    let zeros_b = table_zeros(b, len, 4096);
    let theta0 = zeros_b
        .iter()
        .filter(|(_, s)| *s < 0.0)
        .map(|(z, _)| *z)
        .fold(f64::INFINITY, f64::min);
    if !theta0.is_finite() {
        return None;
    }
    let zeros_d = table_zeros(b_delta, len_d, 4096);
    let image = phi_of_theta(theta0);
    let phi_a = zeros_d
        .iter()
        .filter(|(_, s)| *s < 0.0)
        .min_by(|(a, _), (c, _)| {
            let da = wrap_signed(a - image, len_d).abs();
            let dc = wrap_signed(c - image, len_d).abs();
            da.partial_cmp(&dc).unwrap()
        })
        .map(|(z, _)| *z)?;
    // Basin boundaries: nearest unstable zeros on either side.
    let mut below = -0.5 * len_d;
    let mut above = 0.5 * len_d;
    for (z, s) in &zeros_d {
        if *s <= 0.0 {
            continue;
        }
        let d = wrap_signed(z - phi_a, len_d);
        if d > 0.0 {
            above = above.min(d);
        } else if d < 0.0 {
            below = below.max(d);
        }
    }
    // A stable zero on a circle is fenced by unstable ones; if only one
    // exists it bounds the basin on both sides.
    if above == 0.5 * len_d && below > -0.5 * len_d {
        above = below + len_d;
    }
    if below == -0.5 * len_d && above < 0.5 * len_d {
        below = above - len_d;
    }
    Some(StablePhase {
        theta0,
        phi_a,
        attraction: (phi_a + below, phi_a + above),
    })
}

/// Discrepancy between the two natural phase assignments of a point near the
/// invariant curve: project to the base curve and follow the offset map, or
/// project straight onto the invariant curve. The gap is `O(delta)` times
/// the normal distance.
pub fn phase_map_gap(pm: &PerturbedManifold, y: &DVector<f64>) -> Result<f64> {
    let through_base = pm.phi_of_theta(pm.base().project(y)?.phase);
    let direct = pm.curve_delta().project(y)?.phase;
    Ok(wrap_signed(through_base - direct, pm.curve_delta().length()).abs())
}

/// Normal contraction and tangential stretch rates of the linearized flow
/// along trajectories seeded on the invariant curve.
///
/// Integrates state and Jacobian propagator jointly from 16 equispaced
/// seeds for time `t_horizon` (use at least `5 / lambda` for the rates to
/// settle) and reads the rates from the propagator split into normal and
/// tangential parts at the endpoint.
pub fn lyapunov_type_numbers(
    sys: &SystemModel,
    pm: &PerturbedManifold,
    t_horizon: f64,
) -> Result<LyapunovReport> {
    if !(t_horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "time horizon must be positive, got {t_horizon}"
        )));
    }
    let curve = pm.curve_delta();
    let n = curve.dim();
    let delta = pm.delta();
    let lambda = sys.lambda();
    let steps = (t_horizon / (0.01 / lambda)).ceil() as usize;
    let dt = t_horizon / steps as f64;
    let seeds = 16usize;

    // d/dt Phi = A(z) Phi with A = -H + delta DG, advanced by RK4 alongside
    // the state.
    let mut hess = DMatrix::zeros(n, n);
    let mut dg = DMatrix::zeros(n, n);
    let mut a_of = |z: &DVector<f64>| -> DMatrix<f64> {
        sys.hess_v_into(z.as_slice(), &mut hess);
        sys.dg_into(z.as_slice(), &mut dg);
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                a[(i, k)] = -hess[(i, k)] + delta * dg[(i, k)];
            }
        }
        a
    };
    let drift = |z: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(n);
        sys.drift_into(z.as_slice(), delta, out.as_mut_slice());
        out
    };

    let mut nu_rate = f64::NEG_INFINITY;
    let mut tangential_rate = f64::NEG_INFINITY;
    for s in 0..seeds {
        let phase = curve.length() * s as f64 / seeds as f64;
        let mut z = curve.point(phase);
        let mut t0 = curve.tangent(phase);
        t0 /= t0.norm();
        let mut prop = DMatrix::identity(n, n);
        for _ in 0..steps {
            let k1z = drift(&z);
            let k1p = a_of(&z) * &prop;
            let z2 = &z + &k1z * (0.5 * dt);
            let k2z = drift(&z2);
            let k2p = a_of(&z2) * (&prop + &k1p * (0.5 * dt));
            let z3 = &z + &k2z * (0.5 * dt);
            let k3z = drift(&z3);
            let k3p = a_of(&z3) * (&prop + &k2p * (0.5 * dt));
            let z4 = &z + &k3z * dt;
            let k4z = drift(&z4);
            let k4p = a_of(&z4) * (&prop + &k3p * dt);
            z += (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (dt / 6.0);
            prop += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (dt / 6.0);
        }
        let end = curve.project(&z)?;
        let mut t1 = curve.tangent(end.phase);
        t1 /= t1.norm();
        // Normal block: P_N Phi with P_N = I - t1 t1^T.
        let mut normal_block = prop.clone();
        let row = t1.transpose() * &prop;
        for i in 0..n {
            for k in 0..n {
                normal_block[(i, k)] -= t1[i] * row[(0, k)];
            }
        }
        let sigma_max = normal_block
            .svd(false, false)
            .singular_values
            .iter()
            .fold(0.0f64, |a, &x| a.max(x));
        nu_rate = nu_rate.max(sigma_max.max(1e-300).ln() / t_horizon);
        let stretch = (t1.transpose() * &prop * &t0)[(0, 0)].abs();
        tangential_rate = tangential_rate.max(stretch.max(1e-300).ln() / t_horizon);
    }
    let sigma_estimate = if nu_rate < 0.0 {
        tangential_rate.max(0.0) / (-nu_rate)
    } else {
        f64::INFINITY
    };
    Ok(LyapunovReport {
        nu_rate,
        tangential_rate,
        sigma_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin, BuiltinSystem};

    fn ring(kappa: f64) -> SystemModel {
        make_builtin(&BuiltinSystem::Ring { kappa }).unwrap()
    }

    fn relax(sys: &SystemModel, delta: f64) -> PerturbedManifold {
        relax_to_invariant_curve(sys, delta, &RelaxOptions::default()).unwrap()
    }

    #[test]
    fn first_order_correction_is_known_for_the_benchmarks() {
        // Ring with radial forcing kappa: h^1 = (kappa/2) * radial direction.
        let sys = ring(1.0);
        let h = first_order_correction(&sys, 0.0).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-9, "h1 = {h:?}");
        assert!(h[1].abs() < 1e-9);

        let sys = ring(0.0);
        let h = first_order_correction(&sys, 1.234).unwrap();
        assert!(h.norm() < 1e-9);

        // 3d ring with vertical forcing beta: at theta = 0 the perturbation
        // pushes (0, 0, beta) against the z-well of unit stiffness.
        let sys = make_builtin(&BuiltinSystem::Ring3d { kappa: 0.0, beta: 1.0 }).unwrap();
        let h = first_order_correction(&sys, 0.0).unwrap();
        assert!(h[0].abs() < 1e-9 && h[1].abs() < 1e-9);
        assert!((h[2] - 1.0).abs() < 1e-9, "h1 = {h:?}");
    }

    #[test]
    fn unperturbed_relaxation_returns_the_base_curve() {
        let sys = ring(1.0);
        let pm = relax(&sys, 0.0);
        assert_eq!(pm.iterations(), 0);
        assert!(pm.offset_sup() == 0.0);
        assert!(pm.curve_delta().circle_radius().is_some());
        for j in 0..64 {
            let theta = sys.stationary_curve().length() * j as f64 / 64.0;
            assert!(pm.b(theta).abs() < 1e-12);
            assert!(pm.b_delta(theta).abs() < 1e-12);
        }
        assert!(matches!(pm.stable_phase(), Err(Error::NoStableFixedPoint)));
    }

    #[test]
    fn tangential_perturbation_leaves_the_circle_in_place() {
        // For kappa = 0 the perturbation is tangential on the circle, so the
        // invariant curve is the unit circle itself.
        let sys = ring(0.0);
        let pm = relax(&sys, 0.1);
        assert!(pm.offset_sup() <= 1e-8, "offset sup {}", pm.offset_sup());
        // The initial guess already satisfies the residual bound, so the
        // exact circle representation survives.
        assert!(pm.curve_delta().circle_radius().is_some());
        for j in 0..128 {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / 128.0;
            assert!((pm.b(theta) - 0.1 * theta.cos()).abs() < 1e-10);
            assert!((pm.b_delta(theta) - 0.1 * theta.cos()).abs() < 1e-8);
            assert!((pm.b_tilde(theta) - pm.b(theta)).abs() < 1e-8);
        }
    }

    #[test]
    fn radial_forcing_inflates_the_circle_to_the_exact_radius() {
        // dr/dt = delta*kappa*r - (r^2 - 1) r vanishes at r = sqrt(1 + delta*kappa).
        let delta = 0.05;
        let sys = ring(1.0);
        let pm = relax(&sys, delta);
        let r_star = (1.0 + delta).sqrt();
        let curve = pm.curve_delta();
        let mut mean = 0.0;
        for j in 0..curve.node_count() {
            let r = curve.node(j).norm();
            assert!((r - r_star).abs() < 1e-6, "node radius {r} vs {r_star}");
            mean += r;
        }
        mean /= curve.node_count() as f64;
        assert!((mean - r_star).abs() < 1e-7);
        // First-order prediction 1 + delta/2 is off by ~delta^2/8.
        assert!((mean - 1.0 - 0.5 * delta).abs() < 2.0 * delta * delta);
    }

    #[test]
    fn offsets_are_orthogonal_to_the_base_tangent() {
        let sys = ring(1.0);
        let pm = relax(&sys, 0.08);
        let base = pm.base();
        for j in 0..base.node_count() {
            let t = base.tangent(base.node_phase(j));
            let row = pm.offset_row(j);
            let dot: f64 = row.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "node {j}: <offset, tangent> = {dot:.2e}");
        }
    }

    #[test]
    fn offset_minus_first_order_term_scales_quadratically() {
        let sys = ring(1.0);
        let sup_gap = |delta: f64| -> f64 {
            let pm = relax(&sys, delta);
            let n = pm.base().dim();
            let mut worst = 0.0f64;
            for j in 0..pm.base().node_count() {
                let off = pm.offset_row(j);
                let h1 = pm.h1_row(j);
                let mut s = 0.0;
                for k in 0..n {
                    let d = off[k] - delta * h1[k];
                    s += d * d;
                }
                worst = worst.max(s.sqrt());
            }
            worst
        };
        let g4 = sup_gap(0.04);
        let g8 = sup_gap(0.08);
        // Exact gap is |sqrt(1+delta) - 1 - delta/2| = delta^2/8 + O(delta^3),
        // so doubling delta multiplies it by ~4.
        let ratio = g8 / g4;
        assert!((3.0..=5.0).contains(&ratio), "gap ratio {ratio} (g4={g4:.3e}, g8={g8:.3e})");
    }

    #[test]
    fn pulled_back_drift_differs_from_first_order_at_second_order() {
        let sys = ring(1.0);
        let sup_diff = |delta: f64| -> f64 {
            let pm = relax(&sys, delta);
            let mut worst = 0.0f64;
            for j in 0..256 {
                let theta = 2.0 * std::f64::consts::PI * j as f64 / 256.0;
                worst = worst.max((pm.b_tilde(theta) - pm.b(theta)).abs());
            }
            worst
        };
        let d4 = sup_diff(0.04);
        let d8 = sup_diff(0.08);
        let ratio = d8 / d4;
        assert!((3.2..=4.8).contains(&ratio), "ratio {ratio} (d4={d4:.3e}, d8={d8:.3e})");
    }

    #[test]
    fn refining_the_relaxation_grid_leaves_the_drift_table_fixed() {
        let sys = ring(1.0);
        let mut opts = RelaxOptions::default();
        opts.nodes = 512;
        let coarse = relax_to_invariant_curve(&sys, 0.1, &opts).unwrap();
        opts.nodes = 1024;
        let fine = relax_to_invariant_curve(&sys, 0.1, &opts).unwrap();
        let len = coarse.curve_delta().length();
        let len_f = fine.curve_delta().length();
        assert!((len - len_f).abs() < 1e-7);
        for j in 0..64 {
            let phi = len * j as f64 / 64.0;
            let diff = (coarse.b_delta(phi) - fine.b_delta(phi)).abs();
            assert!(diff <= 1e-6 * 0.1, "b_delta moved by {diff:.2e} at {phi:.3}");
        }
    }

    #[test]
    fn stable_phase_sits_at_the_drift_zero_with_negative_slope() {
        let sys = ring(0.0);
        let pm = relax(&sys, 0.1);
        let sp = pm.stable_phase().unwrap();
        let half_pi = 0.5 * std::f64::consts::PI;
        assert!((sp.theta0 - half_pi).abs() < 1e-10, "theta0 = {}", sp.theta0);
        assert!((sp.phi_a - half_pi).abs() < 1e-8, "phi_a = {}", sp.phi_a);
        // Basin is the full circle minus the unstable zero at 3*pi/2.
        let width = sp.attraction.1 - sp.attraction.0;
        assert!((width - 2.0 * std::f64::consts::PI).abs() < 1e-6);
        assert!(sp.attraction.0 < sp.phi_a && sp.phi_a < sp.attraction.1);
    }

    #[test]
    fn rotational_forcing_has_no_stable_phase() {
        // G = (-y, x) is tangential with constant positive component along
        // the circle, so the reduced drift never vanishes.
        let curve = crate::model::make_builtin(&BuiltinSystem::Ring { kappa: 0.0 })
            .unwrap()
            .stationary_curve()
            .clone();
        let sys = SystemModel::new(
            "rotor",
            curve,
            Box::new(|x: &[f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                0.25 * (r2 - 1.0) * (r2 - 1.0)
            }),
            Box::new(|x: &[f64], out: &mut [f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                out[0] = (r2 - 1.0) * x[0];
                out[1] = (r2 - 1.0) * x[1];
            }),
            Box::new(|x: &[f64], out: &mut [f64]| {
                out[0] = -x[1];
                out[1] = x[0];
            }),
        )
        .compute_spectral_gap()
        .unwrap();
        let pm = relax(&sys, 0.05);
        assert!(matches!(pm.stable_phase(), Err(Error::NoStableFixedPoint)));
        for j in 0..64 {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / 64.0;
            assert!((pm.b(theta) - 0.05).abs() < 1e-10);
        }
    }

    #[test]
    fn phase_assignments_agree_on_the_symmetric_ring() {
        // For kappa = 0 the invariant curve is the base circle and both
        // phase assignments are the polar angle; the gap vanishes.
        let sys = ring(0.0);
        let pm = relax(&sys, 0.1);
        for j in 0..32 {
            let ang = 2.0 * std::f64::consts::PI * j as f64 / 32.0;
            let y = DVector::from_column_slice(&[1.1 * ang.cos(), 1.1 * ang.sin()]);
            assert!(phase_map_gap(&pm, &y).unwrap() < 1e-8);
        }
    }

    #[test]
    fn phase_map_gap_scales_linearly_off_symmetry() {
        // On the rotationally symmetric ring both assignments reduce to the
        // polar angle and the gap vanishes, so the scaling needs a curve
        // without that symmetry. Keep delta small: the correction field of
        // this system reaches norm ~1.3 near the flat ends of the ellipse.
        let sys = make_builtin(&BuiltinSystem::Ellipse { a: 1.5, alpha: 0.5 }).unwrap();
        let gap_at = |delta: f64| -> f64 {
            let pm = relax(&sys, delta);
            let base = pm.base();
            let mut worst = 0.0f64;
            for j in 0..8 {
                let theta = base.length() * (0.37 + j as f64) / 8.0;
                let q = base.point(theta);
                let mut t = base.tangent(theta);
                t /= t.norm();
                // March a fixed distance along a unit normal in the plane.
                let nvec = DVector::from_column_slice(&[-t[1], t[0]]);
                let y = &q + nvec * 0.08;
                worst = worst.max(phase_map_gap(&pm, &y).unwrap());
            }
            worst
        };
        let g2 = gap_at(0.02);
        let g4 = gap_at(0.04);
        let ratio = g4 / g2;
        assert!((1.2..=2.8).contains(&ratio), "gap ratio {ratio} (g2={g2:.3e}, g4={g4:.3e})");
    }

    #[test]
    fn linearized_rates_match_the_spectral_gap() {
        let sys = ring(0.0);
        let pm = relax(&sys, 0.0);
        let rep = lyapunov_type_numbers(&sys, &pm, 2.5).unwrap();
        assert!((rep.nu_rate + 2.0).abs() < 0.05, "nu = {}", rep.nu_rate);
        assert!(rep.tangential_rate.abs() < 0.02, "tan = {}", rep.tangential_rate);
        assert!(rep.sigma_estimate < 1.0);

        let sys3 = make_builtin(&BuiltinSystem::Ring3d { kappa: 0.0, beta: 0.5 }).unwrap();
        let pm3 = relax(&sys3, 0.0);
        let rep3 = lyapunov_type_numbers(&sys3, &pm3, 5.0).unwrap();
        assert!((rep3.nu_rate + 1.0).abs() < 0.05, "nu = {}", rep3.nu_rate);
    }
}
