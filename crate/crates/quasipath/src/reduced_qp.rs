//! One-dimensional quasipotential of the phase diffusion on the invariant
//! curve.
//!
//! The reduced dynamics is d phi = b_delta(phi) dt + sqrt(eps) dB on the
//! circle of length L_delta. Its rate functional is (1/2) int |phi_dot -
//! b_delta|^2 dt, the same normalization as the full n-dimensional
//! functional, so the reduced cost bounds the full one from above. The
//! minimizing transition from the stable phase to a target runs against the
//! flow, which gives the closed form
//!
//!   W_red(target) = min over the two rotational directions of
//!                   2 int max(-b_delta(s) * dir, 0) ds
//!
//! accumulated along the arc from the stable phase to the target; downhill
//! stretches are free.

use crate::error::{Error, Result};
use crate::manifold::PerturbedManifold;
use crate::numerics::{adaptive_simpson, find_root, wrap};

/// Rotational direction on the phase circle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Increasing phase.
    Ccw,
    /// Decreasing phase.
    Cw,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Ccw => 1.0,
            Direction::Cw => -1.0,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Ccw => write!(f, "ccw"),
            Direction::Cw => write!(f, "cw"),
        }
    }
}

/// Cheapest reduced transition cost to a target phase.
#[derive(Clone, Debug)]
pub struct ReducedCost {
    pub w_red: f64,
    pub direction: Direction,
}

/// Effective 1-D potential and one-sided quasipotential costs on a phase
/// grid.
#[derive(Clone, Debug)]
pub struct ReducedPotentialProfile {
    /// Grid phases in `[0, L_delta)`.
    pub phases: Vec<f64>,
    /// `U(phi) = -int_{phi_A}^{phi} b_delta`, integrated counterclockwise
    /// (U is single-valued on the arc `[phi_A, phi_A + L)`; it jumps across
    /// `phi_A` when the loop integral of `b_delta` is nonzero).
    pub u: Vec<f64>,
    /// Cost of reaching each phase clockwise from `phi_A`.
    pub w_cw: Vec<f64>,
    /// Cost of reaching each phase counterclockwise from `phi_A`.
    pub w_ccw: Vec<f64>,
}

impl ReducedPotentialProfile {
    pub fn w_min(&self, j: usize) -> f64 {
        self.w_cw[j].min(self.w_ccw[j])
    }
}

/// Piecewise linear path on the phase circle, stored with an unwrapped
/// (continuous) phase coordinate and times increasing to zero.
#[derive(Clone, Debug)]
pub struct PhasePath {
    times: Vec<f64>,
    phases: Vec<f64>,
}

impl PhasePath {
    pub fn new(times: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if times.len() != phases.len() || times.len() < 2 {
            return Err(Error::InvalidParameter(
                "phase path needs matching time and phase grids with at least two samples".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0]))
            || times.iter().chain(phases.iter()).any(|x| !x.is_finite())
        {
            return Err(Error::InvalidParameter(
                "phase path times must be finite and strictly increasing".into(),
            ));
        }
        Ok(PhasePath { times, phases })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Unwrapped phases; reduce mod `L_delta` to land on the circle.
    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }
}

/// Sample the time-reversed flow `phi_dot = -b_delta(phi)` from `start`
/// until the circle arc to `target` in direction `dir` is covered. Returns
/// a path on times `[-T, 0]`; fails when the flow stalls before arriving
/// (the arc leaves the uphill region).
pub fn reversed_flow_path(
    pm: &PerturbedManifold,
    start: f64,
    target: f64,
    dir: Direction,
    dt: f64,
) -> Result<PhasePath> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let len = pm.curve_delta().length();
    let sign = dir.sign();
    let goal = wrap(sign * (target - start), len);
    if goal == 0.0 {
        return Ok(PhasePath {
            times: vec![-dt, 0.0],
            phases: vec![start, start],
        });
    }
    // x is the distance already covered along the arc; dx/dt = -dir * b.
    let rate = |x: f64| -sign * pm.b_delta(wrap(start + sign * x, len));
    let mut x = 0.0f64;
    let mut xs = vec![0.0f64];
    let max_steps = 200_000_000usize;
    let mut steps = 0usize;
    while x < goal {
        if steps >= max_steps {
            return Err(Error::NoConvergence {
                what: "reversed flow sampling",
                iters: steps,
                residual: goal - x,
            });
        }
        let k1 = rate(x);
        let k2 = rate(x + 0.5 * dt * k1);
        let k3 = rate(x + 0.5 * dt * k2);
        let k4 = rate(x + dt * k3);
        let dx = dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        // Progress decaying this far below the remaining arc means the flow
        // is stalling at a drift zero short of the target.
        if !(dx > 1e-13 * dt * (goal - x).max(1.0)) {
            return Err(Error::NoConvergence {
                what: "reversed flow sampling",
                iters: steps,
                residual: goal - x,
            });
        }
        x += dx;
        xs.push(x.min(goal));
        steps += 1;
    }
    // The last step overshot; put the final sample at the target exactly,
    // at the linearly interpolated arrival time.
    let m = xs.len();
    let overshoot = x - goal;
    let last_dt = if overshoot > 0.0 && x - xs[m - 2] > 0.0 {
        dt * (1.0 - overshoot / (x - xs[m - 2]))
    } else {
        dt
    };
    let t_end = (m - 2) as f64 * dt + last_dt;
    let mut times: Vec<f64> = (0..m - 1).map(|i| i as f64 * dt - t_end).collect();
    times.push(0.0);
    let phases: Vec<f64> = xs.iter().map(|&u| start + sign * u).collect();
    PhasePath::new(times, phases)
}

/// Zeros of `b_delta` on `[0, L_delta)`.
fn drift_zeros(pm: &PerturbedManifold) -> Vec<f64> {
    let len = pm.curve_delta().length();
    let samples = 4 * pm.curve_delta().node_count();
    let mut zeros: Vec<f64> = Vec::new();
    let mut prev_x = 0.0;
    let mut prev_v = pm.b_delta(0.0);
    for i in 1..=samples {
        let x = len * i as f64 / samples as f64;
        let v = pm.b_delta(wrap(x, len));
        if prev_v * v < 0.0 || (prev_v == 0.0 && v != 0.0) {
            let root = if prev_v == 0.0 {
                prev_x
            } else {
                find_root(prev_x, x, 1e-13, |p| pm.b_delta(wrap(p, len)))
            };
            let root = wrap(root, len);
            if zeros.iter().all(|z| (z - root).abs() > 1e-9 && (z - root).abs() < len - 1e-9) {
                zeros.push(root);
            }
        }
        prev_x = x;
        prev_v = v;
    }
    zeros.sort_by(|a, b| a.partial_cmp(b).unwrap());
    zeros
}

/// `2 int max(-b_delta(s) dir, 0) ds` along the arc of length `dist`
/// starting at `from` in direction `dir`.
fn directional_cost_from(
    pm: &PerturbedManifold,
    zeros: &[f64],
    from: f64,
    dist: f64,
    dir: Direction,
) -> f64 {
    if dist <= 0.0 {
        return 0.0;
    }
    let len = pm.curve_delta().length();
    let sign = dir.sign();
    // Break the arc at the zeros of the drift so each piece has one sign.
    let mut breaks: Vec<f64> = zeros
        .iter()
        .map(|z| wrap(sign * (z - from), len))
        .filter(|u| *u > 1e-12 && *u < dist - 1e-12)
        .collect();
    breaks.push(0.0);
    breaks.push(dist);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 1e-14 {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        if -sign * pm.b_delta(wrap(from + sign * mid, len)) <= 0.0 {
            continue;
        }
        let mut f = |u: f64| -sign * pm.b_delta(wrap(from + sign * u, len));
        total += 2.0 * adaptive_simpson(lo, hi, 1e-13, &mut f);
    }
    total
}

/// One-sided reduced transition cost from the stable phase to `phi_target`
/// in the given rotational direction.
pub fn one_sided_reduced_cost(
    pm: &PerturbedManifold,
    phi_target: f64,
    dir: Direction,
) -> Result<f64> {
    let sp = pm.stable_phase()?;
    let len = pm.curve_delta().length();
    let dist = wrap(dir.sign() * (phi_target - sp.phi_a), len);
    let zeros = drift_zeros(pm);
    Ok(directional_cost_from(pm, &zeros, sp.phi_a, dist, dir))
}

/// Cheapest reduced transition cost from the stable phase to `phi_target`,
/// minimized over the two rotational directions.
pub fn reduced_quasipotential(pm: &PerturbedManifold, phi_target: f64) -> Result<ReducedCost> {
    let sp = pm.stable_phase()?;
    let len = pm.curve_delta().length();
    let zeros = drift_zeros(pm);
    let d_ccw = wrap(phi_target - sp.phi_a, len);
    let d_cw = wrap(sp.phi_a - phi_target, len);
    let w_ccw = directional_cost_from(pm, &zeros, sp.phi_a, d_ccw, Direction::Ccw);
    let w_cw = directional_cost_from(pm, &zeros, sp.phi_a, d_cw, Direction::Cw);
    if w_ccw <= w_cw {
        Ok(ReducedCost {
            w_red: w_ccw,
            direction: Direction::Ccw,
        })
    } else {
        Ok(ReducedCost {
            w_red: w_cw,
            direction: Direction::Cw,
        })
    }
}

/// Effective potential and one-sided costs tabulated on a uniform grid of
/// `m` phases.
pub fn reduced_profile(pm: &PerturbedManifold, m: usize) -> Result<ReducedPotentialProfile> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "profile grid needs at least 2 phases, got {m}"
        )));
    }
    let sp = pm.stable_phase()?;
    let len = pm.curve_delta().length();
    let zeros = drift_zeros(pm);
    let mut phases = Vec::with_capacity(m);
    let mut u = Vec::with_capacity(m);
    let mut w_cw = Vec::with_capacity(m);
    let mut w_ccw = Vec::with_capacity(m);
    for j in 0..m {
        let phi = len * j as f64 / m as f64;
        phases.push(phi);
        let d_ccw = wrap(phi - sp.phi_a, len);
        let mut f = |s: f64| pm.b_delta(wrap(sp.phi_a + s, len));
        u.push(-adaptive_simpson(0.0, d_ccw, 1e-13, &mut f));
        w_ccw.push(directional_cost_from(pm, &zeros, sp.phi_a, d_ccw, Direction::Ccw));
        w_cw.push(directional_cost_from(
            pm,
            &zeros,
            sp.phi_a,
            wrap(sp.phi_a - phi, len),
            Direction::Cw,
        ));
    }
    Ok(ReducedPotentialProfile {
        phases,
        u,
        w_cw,
        w_ccw,
    })
}

/// Reduced rate functional `(1/2) int |phi_dot - b_delta(phi)|^2 dt` of a
/// piecewise linear phase path, by the midpoint rule.
pub fn reduced_rate(path: &PhasePath, pm: &PerturbedManifold) -> f64 {
    let len = pm.curve_delta().length();
    let times = path.times();
    let phases = path.phases();
    let mut acc = 0.0;
    for i in 0..times.len() - 1 {
        let dt = times[i + 1] - times[i];
        let rate = (phases[i + 1] - phases[i]) / dt;
        let mid = 0.5 * (phases[i] + phases[i + 1]);
        let dev = rate - pm.b_delta(wrap(mid, len));
        acc += 0.5 * dev * dev * dt;
    }
    acc
}
