//! Discrete path action and its minimization.
//!
//! The cost of a path `Y` over a time window is
//!
//! ```text
//!   I[Y] = 1/2 int ||Y' + grad V(Y) - delta G(Y)||^2 dt,
//! ```
//!
//! zero exactly on forward flow trajectories. Minimizing `I` over paths
//! pinned at a target yields the escape cost of that target together with
//! the most likely transition path. Paths here are uniform-grid polylines;
//! the action uses midpoint quadrature, whose gradient with respect to the
//! interior nodes is assembled exactly, and the minimizer is L-BFGS
//! preconditioned by the dominant second-difference block of the discrete
//! Hessian. Endpoints stay pinned throughout.
//!
//! The initial guess crawls along the invariant curve against the reduced
//! drift, starting a phase offset `delta*|log delta|` past the stable
//! phase; the skipped arc is charged analytically afterwards, so the
//! reported cost refers to the stable point itself.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{tube_classify, TubeClass, TubeSpec};
use crate::manifold::PerturbedManifold;
use crate::model::SystemModel;
use crate::numerics::{solve_tridiagonal, wrap, wrap_signed};
use crate::reduced_qp::{one_sided_reduced_cost, reversed_flow_path, Direction, PhasePath};

/// A time-stamped polyline in the ambient space.
#[derive(Clone, Debug)]
pub struct SpacePath {
    times: Vec<f64>,
    /// Node-major coordinates, `times.len() * dim` entries.
    points: Vec<f64>,
    dim: usize,
    delta: f64,
}

impl SpacePath {
    pub fn new(times: Vec<f64>, points: Vec<f64>, dim: usize, delta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("path dimension is zero".into()));
        }
        if times.len() < 2 {
            return Err(Error::InvalidParameter(
                "a path needs at least two samples".into(),
            ));
        }
        if points.len() != times.len() * dim {
            return Err(Error::InvalidParameter(format!(
                "point storage holds {} entries, expected {}",
                points.len(),
                times.len() * dim
            )));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must be finite and nonnegative, got {delta}"
            )));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidParameter(
                    "path times must increase strictly".into(),
                ));
            }
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "path contains non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            times,
            points,
            dim,
            delta,
        })
    }

    /// Lift of a phase path onto a curve.
    pub fn from_phase_path(
        pp: &PhasePath,
        curve: &crate::geometry::DiscretizedCurve,
        delta: f64,
    ) -> Result<Self> {
        let len = curve.length();
        let nq = curve.dim();
        let mut buf = vec![0.0; nq];
        let mut flat = Vec::with_capacity(pp.times().len() * nq);
        for &phi in pp.phases() {
            curve.point_into(wrap(phi, len), &mut buf);
            flat.extend_from_slice(&buf);
        }
        Self::new(pp.times().to_vec(), flat, nq, delta)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn node_count(&self) -> usize {
        self.times.len()
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_vec(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.point(i))
    }

    /// Linear resampling onto a uniform grid with `n` intervals over the
    /// same window.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidParameter(
                "resampling needs at least one interval".into(),
            ));
        }
        let t0 = self.times[0];
        let t1 = self.times[self.times.len() - 1];
        let mut times = Vec::with_capacity(n + 1);
        let mut flat = Vec::with_capacity((n + 1) * self.dim);
        for j in 0..=n {
            let t = if j == n {
                t1
            } else {
                t0 + (t1 - t0) * j as f64 / n as f64
            };
            times.push(t);
            let i = self
                .times
                .partition_point(|&u| u < t)
                .clamp(1, self.times.len() - 1);
            let (ta, tb) = (self.times[i - 1], self.times[i]);
            let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            let (a, b) = (self.point(i - 1), self.point(i));
            for k in 0..self.dim {
                flat.push((1.0 - w) * a[k] + w * b[k]);
            }
        }
        Self::new(times, flat, self.dim, self.delta)
    }

    /// Same nodes traversed backwards, on the time grid reflected about the
    /// window midpoint.
    pub fn reversed(&self) -> Self {
        let m = self.times.len();
        let t0 = self.times[0];
        let t1 = self.times[m - 1];
        let times: Vec<f64> = self.times.iter().rev().map(|&t| t0 + t1 - t).collect();
        let mut points = Vec::with_capacity(self.points.len());
        for i in (0..m).rev() {
            points.extend_from_slice(self.point(i));
        }
        Self {
            times,
            points,
            dim: self.dim,
            delta: self.delta,
        }
    }

    fn interior(&self) -> &[f64] {
        &self.points[self.dim..(self.times.len() - 1) * self.dim]
    }

    fn set_interior(&mut self, x: &[f64]) {
        let lo = self.dim;
        self.points[lo..lo + x.len()].copy_from_slice(x);
    }
}

/// Midpoint-quadrature action of a path.
pub fn action(sys: &SystemModel, path: &SpacePath) -> f64 {
    let nq = path.dim;
    let delta = path.delta;
    let mut mid = vec![0.0; nq];
    let mut gv = vec![0.0; nq];
    let mut gg = vec![0.0; nq];
    let mut acc = 0.0;
    for i in 0..path.times.len() - 1 {
        let dt = path.times[i + 1] - path.times[i];
        let a = path.point(i);
        let b = path.point(i + 1);
        for k in 0..nq {
            mid[k] = 0.5 * (a[k] + b[k]);
        }
        sys.grad_v_into(&mid, &mut gv);
        sys.g_into(&mid, &mut gg);
        let mut r2 = 0.0;
        for k in 0..nq {
            let r = (b[k] - a[k]) / dt + gv[k] - delta * gg[k];
            r2 += r * r;
        }
        acc += 0.5 * dt * r2;
    }
    acc
}

/// Exact gradient of [`action`] with respect to the interior nodes,
/// node-major, `(node_count - 2) * dim` entries. Endpoints are pinned.
pub fn action_gradient(sys: &SystemModel, path: &SpacePath) -> Vec<f64> {
    let nq = path.dim;
    let m = path.times.len();
    let delta = path.delta;
    let mut mid = vec![0.0; nq];
    let mut gv = vec![0.0; nq];
    let mut gg = vec![0.0; nq];
    let mut hmat = DMatrix::zeros(nq, nq);
    let mut dgmat = DMatrix::zeros(nq, nq);
    // Per interval: the residual r_i and w_i = (H - delta DG)^T r_i at the
    // midpoint, both scaled into the two adjacent node gradients below.
    let mut rs = vec![0.0; (m - 1) * nq];
    let mut ws = vec![0.0; (m - 1) * nq];
    for i in 0..m - 1 {
        let dt = path.times[i + 1] - path.times[i];
        let a = path.point(i);
        let b = path.point(i + 1);
        for k in 0..nq {
            mid[k] = 0.5 * (a[k] + b[k]);
        }
        sys.grad_v_into(&mid, &mut gv);
        sys.g_into(&mid, &mut gg);
        sys.hess_v_into(&mid, &mut hmat);
        sys.dg_into(&mid, &mut dgmat);
        let r = &mut rs[i * nq..(i + 1) * nq];
        for k in 0..nq {
            r[k] = (b[k] - a[k]) / dt + gv[k] - delta * gg[k];
        }
        let w = &mut ws[i * nq..(i + 1) * nq];
        for k in 0..nq {
            let mut s = 0.0;
            for l in 0..nq {
                s += (hmat[(k, l)] - delta * dgmat[(l, k)]) * r[l];
            }
            w[k] = s;
        }
    }
    let mut grad = vec![0.0; (m - 2) * nq];
    for j in 1..m - 1 {
        let dtm = path.times[j] - path.times[j - 1];
        let dtp = path.times[j + 1] - path.times[j];
        let rm = &rs[(j - 1) * nq..j * nq];
        let rp = &rs[j * nq..(j + 1) * nq];
        let wm = &ws[(j - 1) * nq..j * nq];
        let wp = &ws[j * nq..(j + 1) * nq];
        let out = &mut grad[(j - 1) * nq..j * nq];
        for k in 0..nq {
            out[k] = rm[k] - rp[k] + 0.5 * (dtm * wm[k] + dtp * wp[k]);
        }
    }
    grad
}

/// Pointwise defect of the stationarity equation
/// `Y'' = (H - delta DG^T)(grad V - delta G) + delta (DG - DG^T) Y'`
/// at the interior nodes, with central second differences.
#[derive(Clone, Debug)]
pub struct ElResidual {
    /// Node-major residual vectors, `(node_count - 2) * dim` entries.
    pub per_node: Vec<f64>,
    /// Root mean square of the per-node residual norms.
    pub rms: f64,
    /// Largest per-node residual norm.
    pub max: f64,
}

pub fn el_residual(sys: &SystemModel, path: &SpacePath) -> ElResidual {
    let nq = path.dim;
    let m = path.times.len();
    let delta = path.delta;
    let mut gv = vec![0.0; nq];
    let mut gg = vec![0.0; nq];
    let mut f = vec![0.0; nq];
    let mut ydot = vec![0.0; nq];
    let mut hmat = DMatrix::zeros(nq, nq);
    let mut dgmat = DMatrix::zeros(nq, nq);
    let mut per_node = vec![0.0; (m - 2) * nq];
    let mut sum2 = 0.0;
    let mut max = 0.0f64;
    for j in 1..m - 1 {
        let dtm = path.times[j] - path.times[j - 1];
        let dtp = path.times[j + 1] - path.times[j];
        let (ym, y, yp) = (path.point(j - 1), path.point(j), path.point(j + 1));
        sys.grad_v_into(y, &mut gv);
        sys.g_into(y, &mut gg);
        sys.hess_v_into(y, &mut hmat);
        sys.dg_into(y, &mut dgmat);
        for k in 0..nq {
            f[k] = gv[k] - delta * gg[k];
            ydot[k] = (yp[k] - ym[k]) / (dtm + dtp);
        }
        let out = &mut per_node[(j - 1) * nq..j * nq];
        let mut n2 = 0.0;
        for k in 0..nq {
            let yddot = 2.0 * ((yp[k] - y[k]) / dtp - (y[k] - ym[k]) / dtm) / (dtm + dtp);
            let mut rhs = 0.0;
            for l in 0..nq {
                rhs += (hmat[(k, l)] - delta * dgmat[(l, k)]) * f[l];
                rhs += delta * (dgmat[(k, l)] - dgmat[(l, k)]) * ydot[l];
            }
            out[k] = yddot - rhs;
            n2 += out[k] * out[k];
        }
        sum2 += n2;
        max = max.max(n2.sqrt());
    }
    ElResidual {
        per_node,
        rms: (sum2 / (m - 2) as f64).sqrt(),
        max,
    }
}

/// Construction of the crawl-seeded initial guess.
#[derive(Clone, Debug)]
pub struct InitialPathOptions {
    /// Grid intervals in the returned path.
    pub n: usize,
    /// Total duration. `None` takes the natural crawl duration; an explicit
    /// value longer than that pads the head with rest at the start point,
    /// and is required when the reduced drift vanishes identically (there
    /// is nothing to crawl against). A horizon shorter than the crawl is
    /// ignored rather than compressing it.
    pub horizon: Option<f64>,
    /// Step for sampling the reversed phase flow.
    pub dt_crawl: f64,
    /// Duration of the straight closing segment used when the target sits
    /// off the curve.
    pub tail_time: f64,
}

impl Default for InitialPathOptions {
    fn default() -> Self {
        Self {
            n: 2000,
            horizon: None,
            dt_crawl: 1e-3,
            tail_time: 0.5,
        }
    }
}

enum CrawlPlan {
    Flow(PhasePath),
    Uniform { duration: f64, march: f64 },
    None,
}

/// Initial guess for the escape path to `target_phase` in direction `dir`:
/// rest at the start offset, a crawl along the curve against the reduced
/// drift, and (for an off-curve target) a straight closing segment, sampled
/// on a uniform grid ending at time zero.
pub fn initial_path(
    pm: &PerturbedManifold,
    tube: &TubeSpec,
    target_phase: f64,
    end_point: Option<&DVector<f64>>,
    dir: Direction,
    opts: &InitialPathOptions,
) -> Result<SpacePath> {
    if opts.n < 3 {
        return Err(Error::InvalidParameter(
            "initial path needs at least three grid intervals".into(),
        ));
    }
    if !(opts.dt_crawl > 0.0) || !(opts.tail_time > 0.0) {
        return Err(Error::InvalidParameter(
            "crawl step and tail time must be positive".into(),
        ));
    }
    let curve = pm.curve_delta();
    let len = curve.length();
    let delta = pm.delta();
    let nq = curve.dim();
    let u = wrap_signed(target_phase - tube.phi_a, len);
    if u < -tube.delta1 - 1e-9 || u > tube.delta2 + 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "target phase {target_phase} lies outside the tube window"
        )));
    }
    let sign = dir.sign();
    let dist = wrap(sign * (target_phase - tube.phi_a), len);
    let off = if delta > 0.0 {
        (delta * delta.ln().abs()).min(0.9 * dist)
    } else {
        0.0
    };
    let start_phase = wrap(tube.phi_a + sign * off, len);
    let march = dist - off;

    let mut q_target = vec![0.0; nq];
    curve.point_into(wrap(target_phase, len), &mut q_target);
    let gap_to_curve = |p: &DVector<f64>| -> f64 {
        p.iter()
            .zip(&q_target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let tail = match end_point {
        Some(p) if gap_to_curve(p) > 1e-13 => opts.tail_time,
        _ => 0.0,
    };

    let crawl = if march <= 1e-12 {
        CrawlPlan::None
    } else if delta > 0.0 {
        // The reversed reduced flow is monotone away from the stable phase
        // and stalls at the first unstable drift zero, so targets beyond
        // the attraction basin in this direction are unreachable.
        if let Ok(sp) = pm.stable_phase() {
            let basin_arc = match dir {
                Direction::Ccw => sp.attraction.1 - sp.phi_a,
                Direction::Cw => sp.phi_a - sp.attraction.0,
            };
            if dist >= basin_arc - 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "the reversed crawl stalls at the unstable phase {:.6} before \
                     reaching the target",
                    wrap(
                        match dir {
                            Direction::Ccw => sp.attraction.1,
                            Direction::Cw => sp.attraction.0,
                        },
                        len
                    )
                )));
            }
        }
        CrawlPlan::Flow(reversed_flow_path(
            pm,
            start_phase,
            target_phase,
            dir,
            opts.dt_crawl,
        )?)
    } else {
        let t = opts.horizon.ok_or_else(|| {
            Error::InvalidParameter(
                "the reduced drift vanishes; an explicit horizon is required".into(),
            )
        })?;
        if !(t > tail + 1e-9) {
            return Err(Error::InvalidParameter(format!(
                "horizon {t} leaves no room for the crawl"
            )));
        }
        CrawlPlan::Uniform {
            duration: t - tail,
            march,
        }
    };
    let t_crawl = match &crawl {
        CrawlPlan::Flow(pp) => pp.duration(),
        CrawlPlan::Uniform { duration, .. } => *duration,
        CrawlPlan::None => 0.0,
    };
    let natural = t_crawl + tail;
    let total = match opts.horizon {
        Some(t) if t > natural => t,
        _ => natural,
    };
    if !(total > 0.0) {
        // Target and anchor coincide on the curve: a resting path.
        let t_total = opts.horizon.unwrap_or(1.0);
        let pt: &[f64] = end_point.map_or(&q_target[..], |p| p.as_slice());
        let mut times = Vec::with_capacity(opts.n + 1);
        let mut flat = Vec::with_capacity((opts.n + 1) * nq);
        for j in 0..=opts.n {
            times.push(if j == opts.n {
                0.0
            } else {
                -t_total + t_total * j as f64 / opts.n as f64
            });
            flat.extend_from_slice(pt);
        }
        return SpacePath::new(times, flat, nq, delta);
    }

    let crawl_start = -(t_crawl + tail);
    let mut times = Vec::with_capacity(opts.n + 1);
    let mut flat = Vec::with_capacity((opts.n + 1) * nq);
    let mut buf = vec![0.0; nq];
    for j in 0..=opts.n {
        let t = if j == opts.n {
            0.0
        } else {
            -total + total * j as f64 / opts.n as f64
        };
        times.push(t);
        if tail > 0.0 && t >= -tail {
            let s = 1.0 + t / tail;
            let p = end_point.expect("tail implies an off-curve end point");
            for k in 0..nq {
                flat.push((1.0 - s) * q_target[k] + s * p[k]);
            }
            continue;
        }
        let phase = if t <= crawl_start {
            start_phase
        } else {
            match &crawl {
                CrawlPlan::Flow(pp) => interp_phase(pp, t + tail),
                CrawlPlan::Uniform { duration, march } => {
                    let s = (t + tail + duration) / duration;
                    start_phase + sign * march * s
                }
                CrawlPlan::None => start_phase,
            }
        };
        curve.point_into(wrap(phase, len), &mut buf);
        flat.extend_from_slice(&buf);
    }
    SpacePath::new(times, flat, nq, delta)
}

fn interp_phase(pp: &PhasePath, t: f64) -> f64 {
    let times = pp.times();
    let phases = pp.phases();
    let i = times.partition_point(|&u| u < t).clamp(1, times.len() - 1);
    let w = ((t - times[i - 1]) / (times[i] - times[i - 1])).clamp(0.0, 1.0);
    phases[i - 1] + w * (phases[i] - phases[i - 1])
}

/// Settings for [`minimize_action`].
#[derive(Clone, Debug)]
pub struct MamOptions {
    /// Grid intervals of the optimized path.
    pub n: usize,
    /// Horizon forwarded to [`initial_path`].
    pub horizon: Option<f64>,
    /// Stop when the gradient infinity norm falls below
    /// `gtol * max(1, initial action)`.
    pub gtol: f64,
    pub max_iters: usize,
    /// L-BFGS history length.
    pub memory: usize,
    /// Tube containment is re-checked every this many iterations.
    pub escape_check_every: usize,
    /// Try the costlier crawl direction too when its reduced cost is within
    /// a factor three of the cheaper one, and keep the better minimizer.
    pub try_both_directions: bool,
    pub dt_crawl: f64,
}

impl Default for MamOptions {
    fn default() -> Self {
        Self {
            n: 2000,
            horizon: None,
            gtol: 1e-8,
            max_iters: 50_000,
            memory: 12,
            escape_check_every: 25,
            try_both_directions: true,
            dt_crawl: 1e-3,
        }
    }
}

/// A converged minimizer and its cost.
#[derive(Clone, Debug)]
pub struct MamResult {
    pub path: SpacePath,
    /// Minimized action plus the analytic cost of the skipped initial arc;
    /// the escape cost of the target measured from the stable point.
    pub w_mam: f64,
    /// Raw minimized action of `path`.
    pub action: f64,
    /// Reduced cost from the stable phase to the path's start phase.
    pub head_cost: f64,
    /// Reduced cost from the stable phase to the target phase along
    /// `direction`.
    pub w_red: f64,
    pub direction: Direction,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Minimizes the action over paths from the stable point's offset
/// neighborhood to `target`, seeding one crawl per viable direction.
pub fn minimize_action(
    sys: &SystemModel,
    pm: &PerturbedManifold,
    tube: &TubeSpec,
    target: &DVector<f64>,
    opts: &MamOptions,
) -> Result<MamResult> {
    let curve = pm.curve_delta();
    let len = curve.length();
    let proj = curve.project(target)?;
    let phi_t = proj.phase;
    let end_opt = if proj.distance > 1e-12 {
        Some(target)
    } else {
        None
    };

    let have_drift = pm.delta() > 0.0 && pm.stable_phase().is_ok();
    let mut candidates: Vec<(Direction, f64)> = Vec::new();
    if have_drift {
        let c_ccw = one_sided_reduced_cost(pm, phi_t, Direction::Ccw)?;
        let c_cw = one_sided_reduced_cost(pm, phi_t, Direction::Cw)?;
        let (best, worse) = if c_ccw <= c_cw {
            ((Direction::Ccw, c_ccw), (Direction::Cw, c_cw))
        } else {
            ((Direction::Cw, c_cw), (Direction::Ccw, c_ccw))
        };
        candidates.push(best);
        if opts.try_both_directions && worse.1 <= 3.0 * best.1 + 1e-12 {
            candidates.push(worse);
        }
    } else {
        let u = wrap_signed(phi_t - tube.phi_a, len);
        let dir = if u >= 0.0 {
            Direction::Ccw
        } else {
            Direction::Cw
        };
        candidates.push((dir, 0.0));
    }

    let mut best: Option<MamResult> = None;
    let mut first_err: Option<Error> = None;
    for (dir, w_red) in candidates {
        let attempt = minimize_one_direction(sys, pm, tube, phi_t, end_opt, dir, w_red, opts);
        match attempt {
            Ok(r) => {
                if best.as_ref().map_or(true, |b| r.w_mam < b.w_mam) {
                    best = Some(r);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(r) => Ok(r),
        None => Err(first_err.expect("no candidate direction was attempted")),
    }
}

#[allow(clippy::too_many_arguments)]
fn minimize_one_direction(
    sys: &SystemModel,
    pm: &PerturbedManifold,
    tube: &TubeSpec,
    phi_t: f64,
    end_opt: Option<&DVector<f64>>,
    dir: Direction,
    w_red: f64,
    opts: &MamOptions,
) -> Result<MamResult> {
    let ip_opts = InitialPathOptions {
        n: opts.n,
        horizon: opts.horizon,
        dt_crawl: opts.dt_crawl,
        ..Default::default()
    };
    let mut path = initial_path(pm, tube, phi_t, end_opt, dir, &ip_opts)?;
    let (iterations, grad_norm) = optimize_path(sys, pm, tube, &mut path, opts)?;
    let act = action(sys, &path);
    let head_cost = if pm.delta() > 0.0 && pm.stable_phase().is_ok() {
        let start = pm.curve_delta().project(&path.point_vec(0))?.phase;
        one_sided_reduced_cost(pm, start, dir)?
    } else {
        0.0
    };
    Ok(MamResult {
        w_mam: act + head_cost,
        action: act,
        head_cost,
        w_red,
        direction: dir,
        iterations,
        grad_norm,
        path,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest distance from a path node to the curve; any node that fails to
/// project, or a distance beyond `allowed`, counts as having left the tube.
fn check_tube(pm: &PerturbedManifold, path: &SpacePath, allowed: f64) -> Result<()> {
    if !(allowed > 0.0) {
        return Ok(());
    }
    let curve = pm.curve_delta();
    let mut worst = 0.0f64;
    let mut buf = DVector::zeros(path.dim);
    for i in 0..path.node_count() {
        buf.as_mut_slice().copy_from_slice(path.point(i));
        match curve.project(&buf) {
            Ok(p) => worst = worst.max(p.distance),
            Err(_) => {
                return Err(Error::PathEscapedTube {
                    max_dist: f64::INFINITY,
                    allowed,
                })
            }
        }
        if worst > allowed {
            return Err(Error::PathEscapedTube {
                max_dist: worst,
                allowed,
            });
        }
    }
    Ok(())
}

/// Preconditioned L-BFGS over the interior nodes. Returns iterations used
/// and the final gradient infinity norm.
fn optimize_path(
    sys: &SystemModel,
    pm: &PerturbedManifold,
    tube: &TubeSpec,
    path: &mut SpacePath,
    opts: &MamOptions,
) -> Result<(usize, f64)> {
    let m = path.node_count();
    let nq = path.dim;
    if m < 3 {
        return Ok((0, 0.0));
    }
    // Escapes are judged against twice the lateral radius: room to move
    // during optimization, while still catching a wrong horizon early.
    let allowed = 2.0 * tube.lateral_radius();
    check_tube(pm, path, allowed)?;

    // The discrete Hessian is dominated by the second-difference block
    // (1/dt) tridiag(-1, 2, -1) plus a curvature term of order dt*|H|^2;
    // solving against that per coordinate makes unit steps well-scaled.
    let dt = path.duration() / (m - 1) as f64;
    let mut hmat = DMatrix::zeros(nq, nq);
    let mut hscale = 0.0f64;
    for i in (0..m).step_by((m / 8).max(1)) {
        sys.hess_v_into(path.point(i), &mut hmat);
        hscale = hscale.max(hmat.norm());
    }
    let nn = m - 2;
    let sub = vec![-1.0 / dt; nn];
    let sup = vec![-1.0 / dt; nn];
    let diag = vec![2.0 / dt + hscale * hscale * dt; nn];
    let precond = |g: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; nn * nq];
        let mut rhs = vec![0.0; nn];
        for k in 0..nq {
            for j in 0..nn {
                rhs[j] = g[j * nq + k];
            }
            let z = solve_tridiagonal(&sub, &diag, &sup, &rhs);
            for j in 0..nn {
                out[j * nq + k] = z[j];
            }
        }
        out
    };

    let mut x = path.interior().to_vec();
    let mut f = action(sys, path);
    let mut g = action_gradient(sys, path);
    let mut ginf = inf_norm(&g);
    let gtol_eff = opts.gtol * f.abs().max(1.0);

    let mut ss: VecDeque<Vec<f64>> = VecDeque::new();
    let mut ys: VecDeque<Vec<f64>> = VecDeque::new();
    let mut rhos: VecDeque<f64> = VecDeque::new();
    let mut iterations = 0usize;
    let mut converged = ginf <= gtol_eff;

    while !converged && iterations < opts.max_iters {
        iterations += 1;

        // Two-loop recursion with the tridiagonal solve as the base metric.
        let mut q = g.clone();
        let k = ss.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rhos[i] * dot(&ss[i], &q);
            alphas[i] = a;
            for (qj, yj) in q.iter_mut().zip(&ys[i]) {
                *qj -= a * yj;
            }
        }
        let mut d = precond(&q);
        for i in 0..k {
            let b = rhos[i] * dot(&ys[i], &d);
            let c = alphas[i] - b;
            for (dj, sj) in d.iter_mut().zip(&ss[i]) {
                *dj += c * sj;
            }
        }
        for dj in d.iter_mut() {
            *dj = -*dj;
        }
        let mut gd = dot(&g, &d);
        if gd >= 0.0 {
            // Stale curvature pairs; restart from the preconditioned slope.
            ss.clear();
            ys.clear();
            rhos.clear();
            d = precond(&g);
            for dj in d.iter_mut() {
                *dj = -*dj;
            }
            gd = dot(&g, &d);
            if gd >= 0.0 {
                d = g.iter().map(|&v| -v).collect();
                gd = -dot(&g, &g);
            }
        }

        let mut step = 1.0f64;
        let mut accepted = false;
        let x_base = x.clone();
        for _ in 0..60 {
            for (xi, (bi, di)) in x.iter_mut().zip(x_base.iter().zip(&d)) {
                *xi = bi + step * di;
            }
            path.set_interior(&x);
            let f_new = action(sys, path);
            if f_new <= f + 1e-4 * step * gd {
                let g_new = action_gradient(sys, path);
                let s: Vec<f64> = x.iter().zip(&x_base).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                let s2 = dot(&s, &s).sqrt();
                let y2 = dot(&y, &y).sqrt();
                if sy > 1e-12 * s2 * y2 {
                    ss.push_back(s);
                    ys.push_back(y);
                    rhos.push_back(1.0 / sy);
                    if ss.len() > opts.memory {
                        ss.pop_front();
                        ys.pop_front();
                        rhos.pop_front();
                    }
                }
                f = f_new;
                g = g_new;
                ginf = inf_norm(&g);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // The functional no longer resolves a decrease along any
            // direction we can build: accept as converged only if the
            // gradient is already near the target.
            x = x_base;
            path.set_interior(&x);
            if ginf <= 1e3 * gtol_eff {
                converged = true;
                break;
            }
            return Err(Error::NoConvergence {
                what: "action line search",
                iters: iterations,
                residual: ginf,
            });
        }
        if ginf <= gtol_eff {
            converged = true;
        }
        if iterations % opts.escape_check_every == 0 {
            check_tube(pm, path, allowed)?;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "action minimization",
            iters: iterations,
            residual: ginf,
        });
    }
    check_tube(pm, path, allowed)?;
    Ok((iterations, ginf))
}

/// Geometry of a path relative to the invariant curve and its tube.
#[derive(Clone, Debug)]
pub struct PathDiagnostics {
    /// Largest finite-difference speed over the grid intervals.
    pub sup_speed: f64,
    /// Largest node distance to the curve.
    pub sup_dist: f64,
    /// Last time the path is within `layer_coeff * delta^2` of the curve;
    /// the escape layer is the remainder of the window.
    pub tau1: f64,
    /// Last time at or before `tau1` with phase within `delta*|log delta|`
    /// of the anchor.
    pub tau0: f64,
    /// Tube classification of the final node.
    pub end_class: TubeClass,
}

pub fn path_diagnostics(
    pm: &PerturbedManifold,
    tube: &TubeSpec,
    path: &SpacePath,
    layer_coeff: f64,
) -> Result<PathDiagnostics> {
    let curve = pm.curve_delta();
    let len = curve.length();
    let delta = pm.delta();
    let m = path.node_count();
    let nq = path.dim;

    let mut sup_speed = 0.0f64;
    for i in 0..m - 1 {
        let dt = path.times[i + 1] - path.times[i];
        let (a, b) = (path.point(i), path.point(i + 1));
        let mut d2 = 0.0;
        for k in 0..nq {
            let d = (b[k] - a[k]) / dt;
            d2 += d * d;
        }
        sup_speed = sup_speed.max(d2.sqrt());
    }

    let mut dists = Vec::with_capacity(m);
    let mut phases = Vec::with_capacity(m);
    let mut buf = DVector::zeros(nq);
    let mut sup_dist = 0.0f64;
    for i in 0..m {
        buf.as_mut_slice().copy_from_slice(path.point(i));
        let p = curve.project(&buf)?;
        sup_dist = sup_dist.max(p.distance);
        dists.push(p.distance);
        phases.push(p.phase);
    }

    let layer = layer_coeff * delta * delta;
    let tau1 = (0..m)
        .rev()
        .find(|&i| dists[i] <= layer)
        .map_or(path.times[0], |i| path.times[i]);
    let off = if delta > 0.0 {
        delta * delta.ln().abs()
    } else {
        0.0
    };
    let tau0 = (0..m)
        .rev()
        .filter(|&i| path.times[i] <= tau1)
        .find(|&i| wrap_signed(phases[i] - tube.phi_a, len).abs() <= off)
        .map_or(path.times[0], |i| path.times[i]);

    buf.as_mut_slice().copy_from_slice(path.point(m - 1));
    let end_class = tube_classify(curve, tube, &buf)?;
    Ok(PathDiagnostics {
        sup_speed,
        sup_dist,
        tau1,
        tau0,
        end_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{relax_to_invariant_curve, RelaxOptions};
    use crate::model::{make_builtin, BuiltinSystem};
    use std::f64::consts::PI;

    fn ring(kappa: f64) -> SystemModel {
        make_builtin(&BuiltinSystem::Ring { kappa }).unwrap()
    }

    fn curve_point(curve: &crate::geometry::DiscretizedCurve, phase: f64) -> DVector<f64> {
        let mut v = vec![0.0; curve.dim()];
        curve.point_into(wrap(phase, curve.length()), &mut v);
        DVector::from_vec(v)
    }

    fn ring_setup(kappa: f64, delta: f64) -> (SystemModel, PerturbedManifold, TubeSpec) {
        let sys = ring(kappa);
        let pm = relax_to_invariant_curve(&sys, delta, &RelaxOptions::default()).unwrap();
        let phi_a = if delta > 0.0 {
            pm.stable_phase().unwrap().phi_a
        } else {
            PI / 2.0
        };
        let tube = TubeSpec {
            c0: 2.0,
            delta,
            delta1: PI / 2.0,
            delta2: PI / 2.0,
            phi_a,
        };
        (sys, pm, tube)
    }

    fn constant_path(point: &[f64], t_total: f64, n: usize, delta: f64) -> SpacePath {
        let mut times = Vec::with_capacity(n + 1);
        let mut flat = Vec::with_capacity((n + 1) * point.len());
        for j in 0..=n {
            times.push(-t_total + t_total * j as f64 / n as f64);
            flat.extend_from_slice(point);
        }
        SpacePath::new(times, flat, point.len(), delta).unwrap()
    }

    #[test]
    fn resting_at_the_stable_point_costs_nothing() {
        let (sys, pm, tube) = ring_setup(0.0, 0.1);
        let a = curve_point(pm.curve_delta(), tube.phi_a);
        let path = constant_path(a.as_slice(), 5.0, 100, 0.1);
        assert!(action(&sys, &path).abs() <= 1e-12);
        let res = el_residual(&sys, &path);
        assert!(res.max <= 1e-10, "stationarity defect {:.2e}", res.max);
    }

    #[test]
    fn forward_flow_has_negligible_action() {
        let sys = ring(1.0);
        let delta = 0.1;
        let dt = 5e-4;
        let steps = 12_000;
        let mut y = vec![1.3 * 0.7f64.cos(), 1.3 * 0.7f64.sin()];
        let mut times = Vec::with_capacity(steps + 1);
        let mut flat = Vec::with_capacity((steps + 1) * 2);
        let mut k = [vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]];
        let mut tmp = vec![0.0; 2];
        for s in 0..=steps {
            times.push(dt * s as f64 - dt * steps as f64);
            flat.extend_from_slice(&y);
            if s == steps {
                break;
            }
            sys.drift_into(&y, delta, &mut k[0]);
            for i in 0..2 {
                tmp[i] = y[i] + 0.5 * dt * k[0][i];
            }
            sys.drift_into(&tmp, delta, &mut k[1]);
            for i in 0..2 {
                tmp[i] = y[i] + 0.5 * dt * k[1][i];
            }
            sys.drift_into(&tmp, delta, &mut k[2]);
            for i in 0..2 {
                tmp[i] = y[i] + dt * k[2][i];
            }
            sys.drift_into(&tmp, delta, &mut k[3]);
            for i in 0..2 {
                y[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        let path = SpacePath::new(times, flat, 2, delta).unwrap();
        let a = action(&sys, &path);
        assert!(a <= 1e-8, "flow action {a:.2e}");
    }

    #[test]
    fn crawl_action_matches_the_reduced_cost() {
        let (sys, pm, tube) = ring_setup(0.0, 0.1);
        let opts = InitialPathOptions {
            n: 2000,
            ..Default::default()
        };
        let path = initial_path(&pm, &tube, PI, None, Direction::Ccw, &opts).unwrap();
        let a = action(&sys, &path);
        let start = pm.curve_delta().project(&path.point_vec(0)).unwrap().phase;
        let head = one_sided_reduced_cost(&pm, start, Direction::Ccw).unwrap();
        assert!(
            (a - (0.2 - head)).abs() <= 2e-3,
            "crawl action {a:.6} head {head:.6}"
        );
        assert!((a - 0.2).abs() <= 0.01);
    }

    #[test]
    fn horizon_grows_like_log_delta_over_delta() {
        let mut ts = Vec::new();
        for &delta in &[0.1, 0.05] {
            let (_, pm, tube) = ring_setup(0.0, delta);
            let opts = InitialPathOptions {
                n: 200,
                ..Default::default()
            };
            let path = initial_path(&pm, &tube, PI, None, Direction::Ccw, &opts).unwrap();
            ts.push(path.duration());
        }
        let ratio = ts[1] / ts[0];
        let predicted = 2.0 * (1.0 + 2.0f64.ln() / 0.1f64.ln().abs());
        assert!(
            (ratio / predicted - 1.0).abs() <= 0.15,
            "horizon ratio {ratio:.3} vs {predicted:.3}"
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (sys, pm, tube) = ring_setup(1.0, 0.1);
        let opts = InitialPathOptions {
            n: 40,
            ..Default::default()
        };
        let mut path = initial_path(&pm, &tube, tube.phi_a + 0.8, None, Direction::Ccw, &opts)
            .unwrap();
        // Push the nodes off the curve so every term in the gradient is live.
        let m = path.node_count();
        for i in 1..m - 1 {
            let bump = 0.01 * (7.3 * i as f64).sin();
            let twist = 0.01 * (3.1 * i as f64).cos();
            let lo = i * path.dim;
            path.points[lo] += bump;
            path.points[lo + 1] += twist;
        }
        let g = action_gradient(&sys, &path);
        let scale = inf_norm(&g).max(1.0);
        let h = 1e-5;
        for probe in 0..20 {
            let idx = (probe * 7919) % g.len();
            let node = 1 + idx / path.dim;
            let coord = idx % path.dim;
            let lo = node * path.dim + coord;
            let orig = path.points[lo];
            path.points[lo] = orig + h;
            let fp = action(&sys, &path);
            path.points[lo] = orig - h;
            let fm = action(&sys, &path);
            path.points[lo] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (g[idx] - fd).abs() <= 1e-6 * scale,
                "coordinate {idx}: gradient {:.10e} vs difference {fd:.10e}",
                g[idx]
            );
        }
    }

    #[test]
    fn free_motion_residual_is_the_second_difference() {
        // With delta = 0 and the path on the stationary curve the force
        // terms vanish, so the defect reduces to the acceleration.
        let sys = ring(0.0);
        let n = 400;
        let mut times = Vec::with_capacity(n + 1);
        let mut flat = Vec::with_capacity((n + 1) * 2);
        for j in 0..=n {
            let t = -2.0 + 2.0 * j as f64 / n as f64;
            times.push(t);
            let phi = 0.3 + 0.5 * (t + 2.0);
            flat.push(phi.cos());
            flat.push(phi.sin());
        }
        let path = SpacePath::new(times, flat, 2, 0.0).unwrap();
        let res = el_residual(&sys, &path);
        for j in 1..n {
            let dt = path.times[j + 1] - path.times[j];
            let dtm = path.times[j] - path.times[j - 1];
            for k in 0..2 {
                let ydd = 2.0
                    * ((path.point(j + 1)[k] - path.point(j)[k]) / dt
                        - (path.point(j)[k] - path.point(j - 1)[k]) / dtm)
                    / (dt + dtm);
                assert!((res.per_node[(j - 1) * 2 + k] - ydd).abs() <= 1e-12);
            }
        }
        // Centripetal acceleration at angular speed 1/2 on the unit circle.
        assert!((res.rms - 0.25).abs() <= 0.01, "rms {:.4}", res.rms);
    }

    #[test]
    fn reversing_a_gradient_path_shifts_action_by_the_potential_drop() {
        let sys = ring(0.0);
        let n = 8000;
        let mut times = Vec::with_capacity(n + 1);
        let mut flat = Vec::with_capacity((n + 1) * 2);
        for j in 0..=n {
            let t = -2.0 + 2.0 * j as f64 / n as f64;
            times.push(t);
            let s = (t + 2.0) / 2.0;
            let r = 1.3 - 0.22 * s;
            let phi = 0.2 + 0.9 * s;
            flat.push(r * phi.cos());
            flat.push(r * phi.sin());
        }
        let path = SpacePath::new(times, flat, 2, 0.0).unwrap();
        let fwd = action(&sys, &path);
        let bwd = action(&sys, &path.reversed());
        let dv = sys.v(path.point(n)) - sys.v(path.point(0));
        assert!(
            (fwd - bwd - 2.0 * dv).abs() <= 1e-5,
            "identity defect {:.2e}",
            (fwd - bwd - 2.0 * dv).abs()
        );
    }

    #[test]
    fn minimizer_matches_the_reduced_cost_to_cubic_order() {
        let (sys, pm, tube) = ring_setup(0.0, 0.1);
        let target = curve_point(pm.curve_delta(), PI);
        let opts = MamOptions {
            try_both_directions: false,
            ..Default::default()
        };
        let r = minimize_action(&sys, &pm, &tube, &target, &opts).unwrap();
        assert_eq!(r.direction, Direction::Ccw);
        // The free minimizer undercuts the on-curve cost by dipping inside
        // the ring, where the swirl is weaker: depth about 1.5 delta^2 cos^2,
        // saving 4.5 delta^3 int |cos|^3 = 3 delta^3 at this target.
        let gap = r.w_red - r.w_mam;
        assert!(
            (gap - 3e-3).abs() <= 1e-3,
            "w_mam {:.6}, cubic correction {gap:.2e}",
            r.w_mam
        );
        assert!(r.w_mam <= r.w_red + 1e-8);
        assert!(r.head_cost > 0.0 && r.head_cost < 6e-3);
        let diag = path_diagnostics(&pm, &tube, &r.path, 1.0).unwrap();
        assert_eq!(diag.end_class, TubeClass::EndPlus);
        assert!(
            diag.sup_dist > 5e-3 && diag.sup_dist < 5e-2,
            "dip depth {:.3e}",
            diag.sup_dist
        );
        // The target sits on the curve, so the escape layer has zero length,
        // and the offset ball around the anchor is left almost immediately.
        assert_eq!(diag.tau1, 0.0);
        assert!(diag.tau0 <= 0.8 * r.path.times()[0]);
    }

    #[test]
    fn cost_gap_and_dip_depth_scale_cubically_and_quadratically() {
        let mut gaps = Vec::new();
        let mut dips = Vec::new();
        for &delta in &[0.1, 0.05] {
            let (sys, pm, tube) = ring_setup(0.0, delta);
            let target = curve_point(pm.curve_delta(), tube.phi_a + PI / 2.0);
            let opts = MamOptions {
                try_both_directions: false,
                ..Default::default()
            };
            let r = minimize_action(&sys, &pm, &tube, &target, &opts).unwrap();
            gaps.push(r.w_red - r.w_mam);
            let diag = path_diagnostics(&pm, &tube, &r.path, 1.0).unwrap();
            dips.push(diag.sup_dist);
        }
        let gap_ratio = gaps[0] / gaps[1];
        let dip_ratio = dips[0] / dips[1];
        assert!(
            (5.0..=13.0).contains(&gap_ratio),
            "gap {:.3e} -> {:.3e}, ratio {gap_ratio:.2}",
            gaps[0],
            gaps[1]
        );
        assert!(
            (2.5..=6.0).contains(&dip_ratio),
            "dip {:.3e} -> {:.3e}, ratio {dip_ratio:.2}",
            dips[0],
            dips[1]
        );
    }

    #[test]
    fn target_at_the_stable_point_costs_nothing() {
        let (sys, pm, tube) = ring_setup(0.0, 0.1);
        let target = curve_point(pm.curve_delta(), tube.phi_a);
        let opts = MamOptions {
            n: 200,
            ..Default::default()
        };
        let r = minimize_action(&sys, &pm, &tube, &target, &opts).unwrap();
        assert!(r.w_mam <= 1e-8, "w_mam {:.2e}", r.w_mam);
    }

    #[test]
    fn leaving_the_tube_is_an_error() {
        let (sys, pm, _) = ring_setup(0.0, 0.1);
        let tube = TubeSpec {
            c0: 0.05,
            delta: 0.1,
            delta1: PI / 2.0,
            delta2: PI / 2.0,
            phi_a: pm.stable_phase().unwrap().phi_a,
        };
        let target = DVector::from_column_slice(&[-1.5, 0.0]);
        let opts = MamOptions {
            n: 200,
            ..Default::default()
        };
        match minimize_action(&sys, &pm, &tube, &target, &opts) {
            Err(Error::PathEscapedTube { max_dist, allowed }) => {
                assert!(max_dist > allowed);
            }
            other => panic!("expected a tube escape, got {other:?}"),
        }
    }

    #[test]
    fn refining_the_grid_shrinks_the_stationarity_defect() {
        let (sys, pm, tube) = ring_setup(1.0, 0.1);
        let target = curve_point(pm.curve_delta(), tube.phi_a + PI / 2.0);
        let mut rms = Vec::new();
        for &n in &[1000usize, 2000] {
            let opts = MamOptions {
                n,
                try_both_directions: false,
                ..Default::default()
            };
            let r = minimize_action(&sys, &pm, &tube, &target, &opts).unwrap();
            let res = el_residual(&sys, &r.path);
            rms.push(res.rms);
        }
        assert!(
            rms[0] / rms[1] >= 2.0,
            "defect rms {:.3e} -> {:.3e}",
            rms[0],
            rms[1]
        );
        assert!(rms[1] <= 1e-3 * 0.1);
    }

    #[test]
    fn without_drift_the_cost_vanishes_with_the_horizon() {
        let (sys, pm, _) = ring_setup(0.0, 0.0);
        let tube = TubeSpec {
            c0: 1.0,
            delta: 0.0,
            delta1: 2.0,
            delta2: 2.0,
            phi_a: PI / 2.0,
        };
        let target = curve_point(pm.curve_delta(), PI / 2.0 + 1.5);
        let mut costs = Vec::new();
        for &t in &[20.0, 40.0] {
            let opts = MamOptions {
                n: 800,
                horizon: Some(t),
                ..Default::default()
            };
            let r = minimize_action(&sys, &pm, &tube, &target, &opts).unwrap();
            costs.push(r.w_mam);
        }
        assert!(costs[1] < costs[0]);
        assert!(costs[1] <= 0.04, "cost {:.4} at the long horizon", costs[1]);
    }
}
