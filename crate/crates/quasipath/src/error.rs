//! Error type shared by all modules of the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the toolkit.
///
/// Numerical routines report failure through dedicated variants rather than
/// panicking; callers that can recover (for example the scaling harness,
/// which continues with the remaining perturbation strengths when one fails)
/// match on the variant.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor was given parameters outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The normal Hessian on the stationary curve is not positive definite
    /// to tolerance, so the curve is not normally attracting.
    #[error("stationary curve is not normally hyperbolic: {0}")]
    NonHyperbolic(String),

    /// A point set does not describe a usable closed curve (too few points,
    /// repeated consecutive points, zero total length).
    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),

    /// Nearest-point projection is ambiguous: several curve arcs are at the
    /// same distance from the query point.
    #[error("projection onto the curve is not unique at {point:?}")]
    NonUniqueProjection { point: Vec<f64> },

    /// Nearest-point projection degenerates at the query point (the point
    /// sits at or beyond the focal set of the curve, or the solver failed).
    #[error("point {point:?} is outside the projection neighborhood of the curve")]
    OutsideNeighborhood { point: Vec<f64> },

    /// The derivative of the projection map is requested where its
    /// denominator vanishes to tolerance.
    #[error("projection derivative is singular at {point:?} (denominator {denom:.3e})")]
    SingularDenominator { point: Vec<f64>, denom: f64 },

    /// An iterative solver exhausted its iteration budget.
    #[error("no convergence in {what} after {iters} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    /// During curve relaxation a node left the attraction neighborhood.
    #[error("curve relaxation escaped the attracting neighborhood: {0}")]
    ManifoldEscaped(String),

    /// The reduced phase drift has no stable zero.
    #[error("reduced drift has no stable fixed point")]
    NoStableFixedPoint,

    /// A path iterate of the action minimizer left the working tube by more
    /// than the allowed margin.
    #[error("action minimizer path left the tube (max distance {max_dist:.3e}, allowed {allowed:.3e})")]
    PathEscapedTube { max_dist: f64, allowed: f64 },

    /// Experiment configuration is missing, malformed, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
