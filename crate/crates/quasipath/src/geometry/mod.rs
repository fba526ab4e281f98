//! Closed curves in R^n with unit-speed parametrization, nearest-point
//! projection, and the tube geometry used by the escape problem.
//!
//! A curve is addressed by its phase: the arc length coordinate in
//! `[0, L)` where `L` is the total length. Two representations coexist
//! behind one interface. Generic curves are periodic cubic splines through
//! nodes at equal arc spacing; planar circles (the stationary curves of the
//! built-in benchmark systems) are kept in closed form, because several
//! verification tolerances sit below what interpolation can deliver.

mod spline;

pub use spline::PeriodicSpline;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::numerics::{find_root, wrap, wrap_signed};

/// Non-fatal observations made while constructing a curve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CurveWarning {
    /// Fewer than 16 input points: the interpolant is usable but its
    /// accuracy guarantees are void.
    LowResolution,
}

#[derive(Clone, Debug)]
struct CircleArc {
    center: Vec<f64>,
    radius: f64,
    /// Orthonormal in-plane directions; the curve is
    /// `center + radius*(cos(phase/radius) e1 + sin(phase/radius) e2)`.
    e1: Vec<f64>,
    e2: Vec<f64>,
}

#[derive(Clone, Debug)]
enum CurveRep {
    Spline(PeriodicSpline),
    Circle(CircleArc),
}

/// Closed curve with unit-speed phase parameter.
///
/// Invariants maintained by the constructors: nodes sit at equal arc
/// spacing `L/m`; the speed `|q'|` equals 1 up to interpolation error; the
/// tangent and second derivative are orthogonal up to interpolation error.
#[derive(Clone, Debug)]
pub struct DiscretizedCurve {
    n: usize,
    m: usize,
    length: f64,
    /// Node coordinates, node-major; node `i` is at phase `i*L/m`.
    nodes: Vec<f64>,
    rep: CurveRep,
    max_second: f64,
    warnings: Vec<CurveWarning>,
}

/// Result of nearest-point projection onto a curve.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    /// Arc length coordinate of the foot point, in `[0, L)`.
    pub phase: f64,
    /// The foot point itself.
    pub foot: DVector<f64>,
    /// Euclidean distance from the query point to the foot.
    pub distance: f64,
    /// `|q'|^2 - <Y - q, q''>` at the foot; positive inside the projection
    /// neighborhood, and the denominator of the projection derivative.
    pub denom: f64,
}

/// Tube around a curve: lateral radius `c0 * sqrt(delta)` and a phase window
/// `[phi_a - delta1, phi_a + delta2]` around the anchor phase.
#[derive(Clone, Debug)]
pub struct TubeSpec {
    pub c0: f64,
    pub delta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub phi_a: f64,
}

impl TubeSpec {
    pub fn lateral_radius(&self) -> f64 {
        self.c0 * self.delta.sqrt()
    }
}

/// Where a point sits relative to a tube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TubeClass {
    Interior,
    LateralBoundary,
    EndMinus,
    EndPlus,
    /// Strictly beyond the lateral surface.
    Outside,
}

impl std::fmt::Display for TubeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TubeClass::Interior => "interior",
            TubeClass::LateralBoundary => "lateral_boundary",
            TubeClass::EndMinus => "end_minus",
            TubeClass::EndPlus => "end_plus",
            TubeClass::Outside => "outside",
        };
        f.write_str(s)
    }
}

/// Width of the tie band at tube boundaries.
const TUBE_BAND: f64 = 1e-9;

/// Grid minima within this distance of the best one count as ties for the
/// uniqueness check.
const TIE_TOL: f64 = 1e-9;

/// Ties further apart than this many grid steps make the projection
/// ambiguous.
const TIE_SPAN_STEPS: usize = 10;

impl DiscretizedCurve {
    /// Arc-length parametrization of the closed polygon through `points`.
    ///
    /// Accepts 4 or more points (16 or more for the accuracy guarantees to
    /// hold; fewer get a [`CurveWarning::LowResolution`]). The interpolant
    /// is re-sampled at equal arc length twice, then the parameter is scaled
    /// so that the period equals the measured length.
    pub fn arc_length_parametrize(points: &[DVector<f64>]) -> Result<Self> {
        let (n, flat) = flatten_points(points)?;
        Self::arc_length_from_flat(n, flat)
    }

    pub(crate) fn arc_length_from_flat(n: usize, flat: Vec<f64>) -> Result<Self> {
        let m = flat.len() / n;
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "curves need ambient dimension >= 2, got {n}"
            )));
        }
        if m < 4 {
            return Err(Error::DegenerateCurve(format!(
                "need at least 4 points to close a curve, got {m}"
            )));
        }
        let scale = flat.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        let mut knots = Vec::with_capacity(m);
        let mut acc = 0.0;
        for i in 0..m {
            knots.push(acc);
            let j = (i + 1) % m;
            let chord: f64 = (0..n)
                .map(|k| (flat[j * n + k] - flat[i * n + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if chord <= 1e-12 * scale {
                return Err(Error::DegenerateCurve(format!(
                    "consecutive points {i} and {j} coincide"
                )));
            }
            acc += chord;
        }
        let mut spline = PeriodicSpline::new(knots, acc, flat, n)?;
        // Two equal-arc re-sampling passes pull the knots onto the arc
        // length parameter; the final uniform rescale makes the mean speed
        // exactly one.
        for _ in 0..2 {
            let length = spline.total_arc_length();
            let nodes = spline.resample_equal_arc(m, 0.0);
            let knots: Vec<f64> = (0..m).map(|j| length * j as f64 / m as f64).collect();
            spline = PeriodicSpline::new(knots, length, nodes, n)?;
        }
        let length = spline.total_arc_length();
        let nodes = spline.resample_equal_arc(m, 0.0);
        Self::from_flat_equal_arc(n, nodes, length)
    }

    /// Builds a curve from nodes already known to sit at equal arc spacing
    /// on the underlying curve, with total length `period`.
    pub fn from_equal_arc_nodes(points: &[DVector<f64>], period: f64) -> Result<Self> {
        let (n, flat) = flatten_points(points)?;
        Self::from_flat_equal_arc(n, flat, period)
    }

    pub(crate) fn from_flat_equal_arc(n: usize, flat: Vec<f64>, period: f64) -> Result<Self> {
        let m = flat.len() / n;
        if m < 4 {
            return Err(Error::DegenerateCurve(format!(
                "need at least 4 points to close a curve, got {m}"
            )));
        }
        if !(period > 0.0) {
            return Err(Error::DegenerateCurve("non-positive curve length".into()));
        }
        let knots: Vec<f64> = (0..m).map(|j| period * j as f64 / m as f64).collect();
        let spline = PeriodicSpline::new(knots, period, flat.clone(), n)?;
        // The spline's own arc length differs from the nominal period by the
        // interpolation error; stretch the parameter so mean speed is one.
        let length = spline.total_arc_length();
        let knots: Vec<f64> = (0..m).map(|j| length * j as f64 / m as f64).collect();
        let spline = PeriodicSpline::new(knots, length, flat.clone(), n)?;
        let mut warnings = Vec::new();
        if m < 16 {
            warnings.push(CurveWarning::LowResolution);
        }
        let mut curve = DiscretizedCurve {
            n,
            m,
            length,
            nodes: flat,
            rep: CurveRep::Spline(spline),
            max_second: 0.0,
            warnings,
        };
        curve.max_second = curve.measure_max_second();
        Ok(curve)
    }

    /// Exact planar circle of the given radius in the plane spanned by the
    /// orthonormal pair `(e1, e2)` through `center`, discretized at `m`
    /// nodes.
    pub fn circle(
        center: &DVector<f64>,
        radius: f64,
        e1: &DVector<f64>,
        e2: &DVector<f64>,
        m: usize,
    ) -> Result<Self> {
        let n = center.len();
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter("circle radius must be positive".into()));
        }
        if e1.len() != n || e2.len() != n {
            return Err(Error::InvalidParameter("circle frame dimension mismatch".into()));
        }
        if (e1.norm() - 1.0).abs() > 1e-12
            || (e2.norm() - 1.0).abs() > 1e-12
            || e1.dot(e2).abs() > 1e-12
        {
            return Err(Error::InvalidParameter(
                "circle frame must be orthonormal".into(),
            ));
        }
        if m < 4 {
            return Err(Error::DegenerateCurve(format!(
                "need at least 4 nodes, got {m}"
            )));
        }
        let length = 2.0 * std::f64::consts::PI * radius;
        let mut nodes = vec![0.0; m * n];
        for j in 0..m {
            let a = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            for k in 0..n {
                nodes[j * n + k] = center[k] + radius * (a.cos() * e1[k] + a.sin() * e2[k]);
            }
        }
        let mut warnings = Vec::new();
        if m < 16 {
            warnings.push(CurveWarning::LowResolution);
        }
        Ok(DiscretizedCurve {
            n,
            m,
            length,
            nodes,
            rep: CurveRep::Circle(CircleArc {
                center: center.as_slice().to_vec(),
                radius,
                e1: e1.as_slice().to_vec(),
                e2: e2.as_slice().to_vec(),
            }),
            max_second: 1.0 / radius,
            warnings,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    /// Total arc length; phases live in `[0, length)`.
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn warnings(&self) -> &[CurveWarning] {
        &self.warnings
    }

    pub fn node_phase(&self, i: usize) -> f64 {
        self.length * i as f64 / self.m as f64
    }

    pub fn node(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.nodes[i * self.n..(i + 1) * self.n])
    }

    pub fn nodes_flat(&self) -> &[f64] {
        &self.nodes
    }

    /// Radius of the exact circle, when the curve is one.
    pub fn circle_radius(&self) -> Option<f64> {
        match &self.rep {
            CurveRep::Circle(c) => Some(c.radius),
            CurveRep::Spline(_) => None,
        }
    }

    /// Largest curvature magnitude seen on the curve.
    pub fn max_second_deriv(&self) -> f64 {
        self.max_second
    }

    /// Conservative radius within which nearest-point projection is
    /// guaranteed well posed on either side of the curve. Points further
    /// out on the convex side still project fine; the projection routine
    /// itself detects the actual failure modes.
    pub fn injectivity_radius(&self) -> f64 {
        0.5 / self.max_second
    }

    fn measure_max_second(&self) -> f64 {
        let samples = 2 * self.m;
        let mut buf = vec![0.0; self.n];
        let mut best = 0.0f64;
        for i in 0..samples {
            let phase = self.length * i as f64 / samples as f64;
            self.second_into(phase, &mut buf);
            let norm = buf.iter().map(|x| x * x).sum::<f64>().sqrt();
            best = best.max(norm);
        }
        best.max(1e-300)
    }

    /// Curve point at the given phase, written into `out`.
    pub fn point_into(&self, phase: f64, out: &mut [f64]) {
        match &self.rep {
            CurveRep::Spline(s) => s.eval_into(phase, out),
            CurveRep::Circle(c) => {
                let a = phase / c.radius;
                let (sin, cos) = a.sin_cos();
                for k in 0..self.n {
                    out[k] = c.center[k] + c.radius * (cos * c.e1[k] + sin * c.e2[k]);
                }
            }
        }
    }

    /// Unit tangent (up to interpolation error) at the given phase.
    pub fn tangent_into(&self, phase: f64, out: &mut [f64]) {
        match &self.rep {
            CurveRep::Spline(s) => s.deriv_into(phase, out),
            CurveRep::Circle(c) => {
                let a = phase / c.radius;
                let (sin, cos) = a.sin_cos();
                for k in 0..self.n {
                    out[k] = -sin * c.e1[k] + cos * c.e2[k];
                }
            }
        }
    }

    /// Second derivative with respect to the phase.
    pub fn second_into(&self, phase: f64, out: &mut [f64]) {
        match &self.rep {
            CurveRep::Spline(s) => s.second_into(phase, out),
            CurveRep::Circle(c) => {
                let a = phase / c.radius;
                let (sin, cos) = a.sin_cos();
                for k in 0..self.n {
                    out[k] = -(cos * c.e1[k] + sin * c.e2[k]) / c.radius;
                }
            }
        }
    }

    pub fn point(&self, phase: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.point_into(phase, out.as_mut_slice());
        out
    }

    pub fn tangent(&self, phase: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.tangent_into(phase, out.as_mut_slice());
        out
    }

    pub fn second(&self, phase: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.second_into(phase, out.as_mut_slice());
        out
    }

    /// Same curve re-discretized at `m` equal-arc nodes.
    pub fn with_node_count(&self, m: usize) -> Result<Self> {
        match &self.rep {
            CurveRep::Circle(c) => DiscretizedCurve::circle(
                &DVector::from_column_slice(&c.center),
                c.radius,
                &DVector::from_column_slice(&c.e1),
                &DVector::from_column_slice(&c.e2),
                m,
            ),
            CurveRep::Spline(s) => {
                let flat = s.resample_equal_arc(m, 0.0);
                Self::from_flat_equal_arc(self.n, flat, self.length)
            }
        }
    }

    /// Same curve with the phase origin moved to `origin` (a phase on the
    /// current parametrization).
    pub fn rephase(&self, origin: f64) -> Result<Self> {
        match &self.rep {
            CurveRep::Circle(c) => {
                let a = origin / c.radius;
                let (sin, cos) = a.sin_cos();
                let n = self.n;
                let mut e1 = vec![0.0; n];
                let mut e2 = vec![0.0; n];
                for k in 0..n {
                    e1[k] = cos * c.e1[k] + sin * c.e2[k];
                    e2[k] = -sin * c.e1[k] + cos * c.e2[k];
                }
                DiscretizedCurve::circle(
                    &DVector::from_column_slice(&c.center),
                    c.radius,
                    &DVector::from_column_slice(&e1),
                    &DVector::from_column_slice(&e2),
                    self.m,
                )
            }
            CurveRep::Spline(s) => {
                let flat = s.resample_equal_arc(self.m, wrap(origin, self.length));
                Self::from_flat_equal_arc(self.n, flat, self.length)
            }
        }
    }

    /// Nearest-point projection of `y` onto the curve.
    ///
    /// Fails with [`Error::NonUniqueProjection`] when several separated
    /// arcs of the curve are equally close (to within 1e-9), and with
    /// [`Error::OutsideNeighborhood`] when the foot-point equation
    /// degenerates (the query sits at or beyond the focal set) or the
    /// solver cannot bracket a foot point near the closest node.
    pub fn project(&self, y: &DVector<f64>) -> Result<ProjectionResult> {
        assert_eq!(y.len(), self.n, "query point dimension mismatch");
        if let CurveRep::Circle(c) = &self.rep {
            return self.project_circle(c, y);
        }
        let ys = y.as_slice();

        // Grid scan for the closest node and for ambiguity.
        let mut dists = vec![0.0; self.m];
        let mut best = 0usize;
        for i in 0..self.m {
            let d: f64 = (0..self.n)
                .map(|k| (ys[k] - self.nodes[i * self.n + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            dists[i] = d;
            if d < dists[best] {
                best = i;
            }
        }
        let dmin = dists[best];
        let ties: Vec<usize> = (0..self.m).filter(|&i| dists[i] <= dmin + TIE_TOL).collect();
        if tie_span(&ties, self.m) > TIE_SPAN_STEPS {
            return Err(Error::NonUniqueProjection {
                point: ys.to_vec(),
            });
        }

        // Bracket the foot-point equation f(phase) = <y - q, q'> around the
        // best node and refine.
        let h = self.length / self.m as f64;
        let theta0 = self.node_phase(best);
        let mut qb = vec![0.0; self.n];
        let mut tb = vec![0.0; self.n];
        let f = |phase: f64, qb: &mut [f64], tb: &mut [f64]| -> f64 {
            self.point_into(phase, qb);
            self.tangent_into(phase, tb);
            (0..self.n).map(|k| (ys[k] - qb[k]) * tb[k]).sum()
        };
        let mut bracket = None;
        'widen: for half_width in [1usize, 2, 4] {
            let lo = theta0 - half_width as f64 * h;
            let steps = 2 * half_width;
            let mut prev_x = lo;
            let mut prev_f = f(prev_x, &mut qb, &mut tb);
            for s in 1..=steps {
                let x = lo + s as f64 * h;
                let fx = f(x, &mut qb, &mut tb);
                if prev_f == 0.0 || prev_f * fx < 0.0 {
                    bracket = Some((prev_x, x));
                    break 'widen;
                }
                prev_x = x;
                prev_f = fx;
            }
        }
        let Some((lo, hi)) = bracket else {
            return Err(Error::OutsideNeighborhood {
                point: ys.to_vec(),
            });
        };
        let scale = y.norm().max(1.0);
        let mut phase = find_root(lo, hi, 1e-13 * scale, |x| f(x, &mut qb, &mut tb));

        // Newton polish against the exact interpolant derivative.
        let mut sb = vec![0.0; self.n];
        for _ in 0..3 {
            self.point_into(phase, &mut qb);
            self.tangent_into(phase, &mut tb);
            self.second_into(phase, &mut sb);
            let fval: f64 = (0..self.n).map(|k| (ys[k] - qb[k]) * tb[k]).sum();
            let tt: f64 = tb.iter().map(|x| x * x).sum();
            let ws: f64 = (0..self.n).map(|k| (ys[k] - qb[k]) * sb[k]).sum();
            let fprime = -tt + ws;
            if fval.abs() <= 1e-14 * scale || fprime.abs() < 1e-6 {
                break;
            }
            let step = fval / fprime;
            if !step.is_finite() || step.abs() > h {
                break;
            }
            phase -= step;
        }
        phase = wrap(phase, self.length);

        self.point_into(phase, &mut qb);
        self.tangent_into(phase, &mut tb);
        self.second_into(phase, &mut sb);
        let distance: f64 = (0..self.n)
            .map(|k| (ys[k] - qb[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        let tt: f64 = tb.iter().map(|x| x * x).sum();
        let ws: f64 = (0..self.n).map(|k| (ys[k] - qb[k]) * sb[k]).sum();
        let denom = tt - ws;
        if denom <= 1e-9 {
            return Err(Error::OutsideNeighborhood {
                point: ys.to_vec(),
            });
        }
        Ok(ProjectionResult {
            phase,
            foot: DVector::from_column_slice(&qb),
            distance,
            denom,
        })
    }

    fn project_circle(&self, c: &CircleArc, y: &DVector<f64>) -> Result<ProjectionResult> {
        let n = self.n;
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..n {
            let v = y[k] - c.center[k];
            a += v * c.e1[k];
            b += v * c.e2[k];
        }
        let rho = a.hypot(b);
        // Equidistant from every in-plane direction: the center in the
        // plane, or the axis through it.
        if rho <= 1e-9 {
            return Err(Error::NonUniqueProjection {
                point: y.as_slice().to_vec(),
            });
        }
        let angle = b.atan2(a);
        let phase = wrap(angle * c.radius, self.length);
        let mut foot = DVector::zeros(n);
        let (sin, cos) = angle.sin_cos();
        for k in 0..n {
            foot[k] = c.center[k] + c.radius * (cos * c.e1[k] + sin * c.e2[k]);
        }
        let distance = (y - &foot).norm();
        let denom = rho / c.radius;
        Ok(ProjectionResult {
            phase,
            foot,
            distance,
            denom,
        })
    }

    /// Directional derivative of the projection phase map at `y` in the
    /// direction `beta`: `<q'(p(y)), beta> / denom`. Fails with
    /// [`Error::SingularDenominator`] when the denominator is below 1e-6.
    pub fn projection_derivative(&self, y: &DVector<f64>, beta: &DVector<f64>) -> Result<f64> {
        let proj = self.project(y)?;
        self.projection_derivative_at(&proj, beta, y)
    }

    /// Same as [`Self::projection_derivative`] with the projection already
    /// computed.
    pub fn projection_derivative_at(
        &self,
        proj: &ProjectionResult,
        beta: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<f64> {
        if proj.denom <= 1e-6 {
            return Err(Error::SingularDenominator {
                point: y.as_slice().to_vec(),
                denom: proj.denom,
            });
        }
        let tangent = self.tangent(proj.phase);
        Ok(tangent.dot(beta) / proj.denom)
    }
}

/// Circular span, in grid steps, of a sorted index set on a cyclic grid of
/// `m` nodes: `m` minus the largest circular gap between consecutive
/// indices.
fn tie_span(sorted: &[usize], m: usize) -> usize {
    if sorted.len() <= 1 {
        return 0;
    }
    let mut max_gap = 0usize;
    for w in sorted.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    max_gap = max_gap.max(sorted[0] + m - sorted[sorted.len() - 1]);
    m - max_gap
}

fn flatten_points(points: &[DVector<f64>]) -> Result<(usize, Vec<f64>)> {
    if points.is_empty() {
        return Err(Error::DegenerateCurve("no points given".into()));
    }
    let n = points[0].len();
    let mut flat = Vec::with_capacity(points.len() * n);
    for (i, p) in points.iter().enumerate() {
        if p.len() != n {
            return Err(Error::InvalidParameter(format!(
                "point {i} has dimension {}, expected {n}",
                p.len()
            )));
        }
        flat.extend_from_slice(p.as_slice());
    }
    Ok((n, flat))
}

/// Classifies `y` against the tube: strictly inside, on one of the three
/// boundary pieces (within a 1e-9 band, ties resolved toward the boundary),
/// or beyond the lateral surface. Projection failures propagate; callers
/// that treat them as "left the tube" match on the error.
pub fn tube_classify(
    curve: &DiscretizedCurve,
    tube: &TubeSpec,
    y: &DVector<f64>,
) -> Result<TubeClass> {
    let proj = curve.project(y)?;
    let radius = tube.lateral_radius();
    let u = wrap_signed(proj.phase - tube.phi_a, curve.length());
    let lat = proj.distance - radius;
    let em = -tube.delta1 - u;
    let ep = u - tube.delta2;

    if lat <= TUBE_BAND && em <= TUBE_BAND && ep <= TUBE_BAND {
        if lat < -TUBE_BAND && em < -TUBE_BAND && ep < -TUBE_BAND {
            return Ok(TubeClass::Interior);
        }
        // On at least one boundary band; report the most violated one, ends
        // taking precedence over the side on exact ties.
        if ep >= em && ep >= lat {
            return Ok(TubeClass::EndPlus);
        }
        if em >= ep && em >= lat {
            return Ok(TubeClass::EndMinus);
        }
        return Ok(TubeClass::LateralBoundary);
    }

    // Strictly beyond at least one face: decide by relative excess, ends
    // taking precedence on ties.
    let rel_lat = lat / radius.max(1e-300);
    let rel_em = em / tube.delta1.max(1e-300);
    let rel_ep = ep / tube.delta2.max(1e-300);
    if rel_ep > TUBE_BAND && rel_ep >= rel_em && rel_ep >= rel_lat {
        return Ok(TubeClass::EndPlus);
    }
    if rel_em > TUBE_BAND && rel_em >= rel_ep && rel_em >= rel_lat {
        return Ok(TubeClass::EndMinus);
    }
    Ok(TubeClass::Outside)
}

/// Writes the curve nodes as CSV with header `x0,...,x{n-1}`; floats use the
/// shortest round-trip representation, so re-reading reproduces the bits.
pub fn write_nodes_csv(curve: &DiscretizedCurve, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    let n = curve.dim();
    for k in 0..n {
        if k > 0 {
            out.push(',');
        }
        out.push_str(&format!("x{k}"));
    }
    out.push('\n');
    for i in 0..curve.node_count() {
        let row = &curve.nodes_flat()[i * n..(i + 1) * n];
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a point set from CSV with header `x0,...,x{n-1}`.
pub fn read_points_csv(path: &std::path::Path) -> Result<Vec<DVector<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidParameter("empty CSV file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for (k, col) in cols.iter().enumerate() {
        if *col != format!("x{k}") {
            return Err(Error::InvalidParameter(format!(
                "expected CSV header column x{k}, found {col:?}"
            )));
        }
    }
    let n = cols.len();
    let mut points = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(',').map(str::trim).collect();
        if vals.len() != n {
            return Err(Error::InvalidParameter(format!(
                "CSV row {} has {} fields, expected {n}",
                row + 2,
                vals.len()
            )));
        }
        let mut p = DVector::zeros(n);
        for (k, v) in vals.iter().enumerate() {
            p[k] = v.parse::<f64>().map_err(|e| {
                Error::InvalidParameter(format!("CSV row {}, column {k}: {e}", row + 2))
            })?;
        }
        points.push(p);
    }
    Ok(points)
}
