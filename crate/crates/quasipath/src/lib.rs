//! Numerical toolkit for quasipotentials of gradient systems perturbed by a
//! weak non-gradient drift.
//!
//! The systems treated here have the form
//!
//! ```text
//! dX = (-grad V[X] + delta * G[X]) dt + sqrt(epsilon) dB
//! ```
//!
//! where the potential `V` has a closed curve `M` of stationary points that
//! attracts at a uniform exponential rate in the normal directions, and
//! `delta` is small. For such systems the exit problem from a tubular
//! neighborhood of `M` is governed by a quasipotential that collapses, to
//! leading order, onto a one-dimensional quantity computed from the phase
//! dynamics along the persisted invariant curve `M_delta`.
//!
//! The crate provides, in dependency order:
//!
//! * [`geometry`]: closed curves with unit-speed parametrization, nearest
//!   point projection and its derivative, tube classification;
//! * [`model`]: system descriptions (potential, perturbation, stationary
//!   curve) with built-in benchmark families and derivative checking;
//! * [`manifold`]: persistence of the stationary curve under the
//!   perturbation, reduced phase drifts, invariant-curve diagnostics;
//! * [`reduced_qp`]: the one-dimensional reduced quasipotential;
//! * [`action`]: the path action functional, its exact discrete gradient,
//!   and a preconditioned minimum-action solver;
//! * [`escape`]: direct Euler-Maruyama exit-time simulation with a
//!   counter-based noise stream;
//! * [`harness`]: experiment configuration, scaling studies, report emission,
//!   and the pieces behind the `quasipath` command line interface.

pub mod action;
pub mod error;
pub mod escape;
pub mod geometry;
pub mod harness;
pub mod manifold;
pub mod model;
pub mod numerics;
pub mod reduced_qp;
pub mod rng;

pub use error::{Error, Result};
