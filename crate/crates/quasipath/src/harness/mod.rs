//! Experiment pipelines behind the command-line interface.
//!
//! Each `run_*` entry point consumes an [`ExperimentConfig`], executes one
//! experiment, writes its CSV/SVG/summary artifacts into the output
//! directory, and reports a pass/fail verdict where the experiment carries
//! acceptance thresholds. Per-strength stages run in parallel; everything
//! emitted is deterministic given the configuration and master seed.

pub mod config;
pub mod report;

pub use config::{load_config, parse_config, ExperimentConfig};

use std::path::PathBuf;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::action::{minimize_action, path_diagnostics, MamOptions};
use crate::error::{Error, Result};
use crate::escape::{escape_ensemble, EnsembleOptions, EscapeStats};
use crate::geometry::TubeSpec;
use crate::manifold::{lyapunov_type_numbers, relax_to_invariant_curve, PerturbedManifold};
use crate::model::{make_builtin, BuiltinSystem, SystemModel};
use crate::numerics::{wrap, wrap_signed};
use crate::reduced_qp::{one_sided_reduced_cost, reduced_profile, Direction};
use report::{fmt_f64, svg_histogram, svg_loglog, write_csv, write_text, Series};

/// Fitted log-log slopes at or above this count as the cubic-order regime.
pub const SLOPE_THRESHOLD: f64 = 2.0;
/// Gaps at or below this sit at the optimizer floor regardless of slope.
pub const GAP_FLOOR: f64 = 1e-6;
/// Exit exponent must match the minimized cost within this relative error.
pub const EXPONENT_TOL: f64 = 0.25;
/// Exit phases within this arc of a tube end count as end-located.
pub const END_ARC: f64 = 0.15;
/// At least this fraction of exits must be end-located.
pub const END_FRACTION: f64 = 0.80;
/// Escape-layer width coefficient used for path diagnostics.
pub const LAYER_COEFF: f64 = 10.0;

const C0_GRID: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

fn system_label(s: &BuiltinSystem) -> String {
    match s {
        BuiltinSystem::Ring { kappa } => format!("ring kappa={kappa}"),
        BuiltinSystem::Ring3d { kappa, beta } => format!("ring3d kappa={kappa} beta={beta}"),
        BuiltinSystem::Ellipse { a, alpha } => format!("ellipse a={a} alpha={alpha}"),
    }
}

/// Orthonormal basis of the normal space at `phase`, by Gram-Schmidt of the
/// coordinate axes against the unit tangent.
fn normal_basis(curve: &crate::geometry::DiscretizedCurve, phase: f64) -> Vec<Vec<f64>> {
    let n = curve.dim();
    let mut t = vec![0.0; n];
    curve.tangent_into(phase, &mut t);
    let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut t {
        *x /= tn;
    }
    let mut basis: Vec<Vec<f64>> = vec![t];
    for k in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        for b in &basis {
            let dot: f64 = e.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in e.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for x in &mut e {
                *x /= norm;
            }
            basis.push(e);
        }
    }
    basis.remove(0);
    basis
}

/// Infimum of the gradient barrier `2(V(E) - V(foot))` over validated
/// samples of the lateral surface at radius `c0 sqrt(delta)`. Candidate
/// points whose re-projection does not land back at that distance are not
/// on the surface (it has locally vanished) and are discarded; with no
/// valid sample left the surface is empty and the infimum is infinite.
fn lateral_barrier_infimum(
    sys: &SystemModel,
    pm: &PerturbedManifold,
    c0: f64,
    delta1: f64,
    delta2: f64,
    phi_a: f64,
) -> f64 {
    let curve = pm.curve_delta();
    let n = curve.dim();
    let radius = c0 * pm.delta().sqrt();
    let dirs_per_phase = 2 * (n - 1);
    let phases = (256 / dirs_per_phase).max(1);
    let mut q = vec![0.0; n];
    let mut inf = f64::INFINITY;
    for i in 0..phases {
        let u = -delta1 + (i as f64 + 0.5) / phases as f64 * (delta1 + delta2);
        let phase = wrap(phi_a + u, curve.length());
        curve.point_into(phase, &mut q);
        let v_foot = sys.v(&q);
        for b in normal_basis(curve, phase) {
            for sign in [1.0, -1.0] {
                let e: Vec<f64> = q
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| x + sign * radius * y)
                    .collect();
                let ev = DVector::from_column_slice(&e);
                let Ok(proj) = curve.project(&ev) else {
                    continue;
                };
                if (proj.distance - radius).abs() > 1e-6 * radius.max(1.0) {
                    continue;
                }
                inf = inf.min(2.0 * (sys.v(&e) - v_foot));
            }
        }
    }
    inf
}

/// Smallest grid constant whose lateral barrier is at least twice the
/// larger of the two reduced end costs. Returns `(c0, barrier, threshold)`.
pub fn auto_c0(
    sys: &SystemModel,
    pm: &PerturbedManifold,
    delta1: f64,
    delta2: f64,
) -> Result<(f64, f64, f64)> {
    let sp = pm.stable_phase()?;
    let phi_a = sp.phi_a;
    let len = pm.curve_delta().length();
    let w_plus = one_sided_reduced_cost(pm, wrap(phi_a + delta2, len), Direction::Ccw)?;
    let w_minus = one_sided_reduced_cost(pm, wrap(phi_a - delta1, len), Direction::Cw)?;
    let threshold = 2.0 * w_plus.max(w_minus);
    for c0 in C0_GRID {
        let inf = lateral_barrier_infimum(sys, pm, c0, delta1, delta2, phi_a);
        if inf >= threshold {
            return Ok((c0, inf, threshold));
        }
    }
    Err(Error::Config(format!(
        "no lateral constant in {C0_GRID:?} clears the barrier threshold {threshold:.4e}"
    )))
}

struct DeltaSetup {
    pm: PerturbedManifold,
    tube: TubeSpec,
    phi_a: f64,
}

fn setup_delta(sys: &SystemModel, cfg: &ExperimentConfig, delta: f64) -> Result<DeltaSetup> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "this experiment needs a positive perturbation strength, got {delta}"
        )));
    }
    let pm = relax_to_invariant_curve(sys, delta, &cfg.relax_options())?;
    let phi_a = pm.stable_phase()?.phi_a;
    let c0 = match cfg.tube_c0 {
        Some(c0) => c0,
        None => auto_c0(sys, &pm, cfg.tube_delta1, cfg.tube_delta2)?.0,
    };
    let tube = TubeSpec {
        c0,
        delta,
        delta1: cfg.tube_delta1,
        delta2: cfg.tube_delta2,
        phi_a,
    };
    Ok(DeltaSetup { pm, tube, phi_a })
}

fn mam_options(cfg: &ExperimentConfig, sys: &SystemModel, delta: f64) -> MamOptions {
    let horizon = if cfg.mam_t_factor > 0.0 {
        Some(cfg.mam_t_factor * 4.0 / sys.lambda() * delta.ln().abs() / delta)
    } else {
        None
    };
    MamOptions {
        n: cfg.mam_n,
        horizon,
        gtol: cfg.mam_gtol,
        max_iters: cfg.mam_max_iters,
        ..MamOptions::default()
    }
}

/// Minimization targets: the two tube ends plus three on-curve interior
/// phases, as offsets from the stable phase.
fn scaling_targets(delta1: f64, delta2: f64) -> [(&'static str, f64); 5] {
    [
        ("end_minus", -delta1),
        ("end_plus", delta2),
        ("interior_a", -0.5 * delta1),
        ("interior_b", 0.5 * delta2),
        ("interior_c", 0.75 * delta2),
    ]
}

/// One minimization outcome inside the scaling experiment.
#[derive(Clone, Debug)]
pub struct TargetRow {
    pub delta: f64,
    pub c0: f64,
    pub label: &'static str,
    /// Target phase as an offset from the stable phase.
    pub phase_offset: f64,
    pub direction: String,
    pub w_red: f64,
    pub w_mam: f64,
    pub gap: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub sup_dist: f64,
    /// Largest path speed divided by `sqrt(delta)`.
    pub speed_ratio: f64,
    /// "ok" or the error that stopped this target.
    pub status: String,
}

impl TargetRow {
    fn failed(delta: f64, c0: f64, label: &'static str, offset: f64, err: &Error) -> Self {
        TargetRow {
            delta,
            c0,
            label,
            phase_offset: offset,
            direction: String::new(),
            w_red: f64::NAN,
            w_mam: f64::NAN,
            gap: f64::NAN,
            iterations: 0,
            grad_norm: f64::NAN,
            sup_dist: f64::NAN,
            speed_ratio: f64::NAN,
            status: err.to_string(),
        }
    }
}

/// Least-squares fit of `log gap` against `log delta` for one target.
#[derive(Clone, Debug)]
pub struct GapSeries {
    pub label: &'static str,
    /// Gap per strength, `NaN` where the target failed.
    pub gaps: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Fit residuals in log space, `NaN` where the target failed.
    pub residuals: Vec<f64>,
}

/// Scaling experiment result across the strength grid.
#[derive(Clone, Debug)]
pub struct ScalingFit {
    pub deltas: Vec<f64>,
    pub series: Vec<GapSeries>,
    pub failures: Vec<String>,
}

/// Full scaling-check output.
#[derive(Clone, Debug)]
pub struct TheoremCheckResult {
    pub fit: ScalingFit,
    pub rows: Vec<TargetRow>,
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

fn loglog_fit(deltas: &[f64], gaps: &[f64]) -> (f64, f64, Vec<f64>) {
    let pts: Vec<(f64, f64)> = deltas
        .iter()
        .zip(gaps)
        .filter(|(d, g)| g.is_finite() && **g > 0.0 && **d > 0.0)
        .map(|(d, g)| (d.ln(), g.ln()))
        .collect();
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN, vec![f64::NAN; gaps.len()]);
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let residuals = deltas
        .iter()
        .zip(gaps)
        .map(|(d, g)| {
            if g.is_finite() && *g > 0.0 {
                g.ln() - (slope * d.ln() + intercept)
            } else {
                f64::NAN
            }
        })
        .collect();
    (slope, intercept, residuals)
}

fn scaling_rows_for_delta(
    sys: &SystemModel,
    cfg: &ExperimentConfig,
    delta: f64,
) -> Vec<TargetRow> {
    let targets = scaling_targets(cfg.tube_delta1, cfg.tube_delta2);
    let setup = match setup_delta(sys, cfg, delta) {
        Ok(s) => s,
        Err(e) => {
            return targets
                .iter()
                .map(|(label, u)| TargetRow::failed(delta, f64::NAN, label, *u, &e))
                .collect()
        }
    };
    let curve = setup.pm.curve_delta();
    let len = curve.length();
    let opts = mam_options(cfg, sys, delta);
    let mut q = vec![0.0; curve.dim()];
    targets
        .iter()
        .map(|&(label, u)| {
            curve.point_into(wrap(setup.phi_a + u, len), &mut q);
            let target = DVector::from_column_slice(&q);
            match minimize_action(sys, &setup.pm, &setup.tube, &target, &opts) {
                Ok(r) => {
                    let diag = path_diagnostics(&setup.pm, &setup.tube, &r.path, LAYER_COEFF);
                    let (sup_dist, sup_speed) = match diag {
                        Ok(d) => (d.sup_dist, d.sup_speed),
                        Err(_) => (f64::NAN, f64::NAN),
                    };
                    TargetRow {
                        delta,
                        c0: setup.tube.c0,
                        label,
                        phase_offset: u,
                        direction: r.direction.to_string(),
                        w_red: r.w_red,
                        w_mam: r.w_mam,
                        gap: (r.w_mam - r.w_red).abs(),
                        iterations: r.iterations,
                        grad_norm: r.grad_norm,
                        sup_dist,
                        speed_ratio: sup_speed / delta.sqrt(),
                        status: "ok".into(),
                    }
                }
                Err(e) => TargetRow::failed(delta, setup.tube.c0, label, u, &e),
            }
        })
        .collect()
}

/// Scaling experiment: minimize the action to the tube ends and interior
/// targets on every strength in the grid, then fit the gap to the reduced
/// cost against the strength in log-log coordinates. A failing strength is
/// recorded and the remaining grid still runs.
pub fn run_theorem_check(cfg: &ExperimentConfig) -> Result<TheoremCheckResult> {
    let sys = make_builtin(&cfg.system)?;
    let per_delta: Vec<Vec<TargetRow>> = cfg
        .delta_list
        .par_iter()
        .map(|&delta| scaling_rows_for_delta(&sys, cfg, delta))
        .collect();
    let rows: Vec<TargetRow> = per_delta.into_iter().flatten().collect();
    let failures: Vec<String> = rows
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| format!("delta {} {}: {}", r.delta, r.label, r.status))
        .collect();

    let targets = scaling_targets(cfg.tube_delta1, cfg.tube_delta2);
    let series: Vec<GapSeries> = targets
        .iter()
        .map(|&(label, _)| {
            let gaps: Vec<f64> = cfg
                .delta_list
                .iter()
                .map(|&d| {
                    rows.iter()
                        .find(|r| r.delta == d && r.label == label && r.status == "ok")
                        .map_or(f64::NAN, |r| r.gap)
                })
                .collect();
            let (slope, intercept, residuals) = loglog_fit(&cfg.delta_list, &gaps);
            GapSeries {
                label,
                gaps,
                slope,
                intercept,
                residuals,
            }
        })
        .collect();

    let passed = failures.is_empty()
        && series.iter().all(|s| {
            let valid: Vec<f64> = s.gaps.iter().copied().filter(|g| g.is_finite()).collect();
            let at_floor = !valid.is_empty() && valid.iter().all(|g| *g <= GAP_FLOOR);
            s.slope >= SLOPE_THRESHOLD || at_floor
        });

    let fit = ScalingFit {
        deltas: cfg.delta_list.clone(),
        series,
        failures,
    };
    let files = emit_theorem_report(cfg, &fit, &rows, passed)?;
    Ok(TheoremCheckResult {
        fit,
        rows,
        passed,
        files,
    })
}

fn emit_theorem_report(
    cfg: &ExperimentConfig,
    fit: &ScalingFit,
    rows: &[TargetRow],
    passed: bool,
) -> Result<Vec<PathBuf>> {
    let header = "delta,c0,target,phase_offset,direction,w_red,w_mam,gap,iterations,\
                  grad_norm,sup_dist,sup_speed_over_sqrt_delta,status";
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                fmt_f64(r.delta),
                fmt_f64(r.c0),
                r.label,
                fmt_f64(r.phase_offset),
                r.direction,
                fmt_f64(r.w_red),
                fmt_f64(r.w_mam),
                fmt_f64(r.gap),
                r.iterations,
                fmt_f64(r.grad_norm),
                fmt_f64(r.sup_dist),
                fmt_f64(r.speed_ratio),
                r.status.replace(',', ";")
            )
        })
        .collect();
    let mut files = Vec::new();
    files.push(write_csv(&cfg.out_dir.join("scaling.csv"), header, &csv_rows)?);

    let plot: Vec<Series> = fit
        .series
        .iter()
        .map(|s| Series {
            label: format!("{} (slope {:.2})", s.label, s.slope),
            points: fit.deltas.iter().copied().zip(s.gaps.iter().copied()).collect(),
        })
        .collect();
    let svg = svg_loglog(&plot, "delta", "|w_mam - w_red|");
    files.push(write_text(&cfg.out_dir.join("scaling.svg"), &svg)?);

    let mut s = String::new();
    s.push_str("scaling check\n");
    s.push_str(&format!("system: {}\n", system_label(&cfg.system)));
    s.push_str(&format!(
        "deltas: {}\n",
        fit.deltas.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
    ));
    s.push_str(&format!(
        "tube: c0={} delta1={} delta2={}\n\n",
        cfg.tube_c0.map_or("auto".into(), |c| c.to_string()),
        cfg.tube_delta1,
        cfg.tube_delta2
    ));
    for ser in &fit.series {
        let valid: Vec<f64> = ser.gaps.iter().copied().filter(|g| g.is_finite()).collect();
        let at_floor = !valid.is_empty() && valid.iter().all(|g| *g <= GAP_FLOOR);
        let ok = ser.slope >= SLOPE_THRESHOLD || at_floor;
        s.push_str(&format!(
            "series {:<11} slope {:7.3} intercept {:7.3} gaps [{}] -> {}\n",
            ser.label,
            ser.slope,
            ser.intercept,
            ser.gaps
                .iter()
                .map(|g| format!("{g:.3e}"))
                .collect::<Vec<_>>()
                .join(" "),
            if ok {
                if ser.slope >= SLOPE_THRESHOLD {
                    "PASS"
                } else {
                    "PASS (floor)"
                }
            } else {
                "FAIL"
            }
        ));
    }
    if fit.failures.is_empty() {
        s.push_str("\nfailures: none\n");
    } else {
        s.push_str("\nfailures:\n");
        for f in &fit.failures {
            s.push_str(&format!("  {f}\n"));
        }
    }
    s.push_str(&format!(
        "\nverdict: {} (slope threshold {SLOPE_THRESHOLD}, floor {GAP_FLOOR:.0e})\n",
        if passed { "PASS" } else { "FAIL" }
    ));
    files.push(write_text(&cfg.out_dir.join("summary.txt"), &s)?);
    Ok(files)
}

/// Acceptance bookkeeping for one noise level of the exit experiment.
#[derive(Clone, Debug)]
pub struct EscapeLevelCheck {
    pub epsilon: f64,
    pub eps_log_mean: f64,
    /// Minimized cost at the end the exits favor.
    pub w_exit: f64,
    pub rel_err: f64,
    pub exponent_ok: bool,
    pub near_end_fraction: f64,
    pub location_ok: bool,
    pub end_exits: usize,
    pub lateral_exits: usize,
    pub domination_ok: bool,
    pub truncated_fraction: f64,
    /// False when truncation exceeds five percent and the exponent
    /// estimate cannot be trusted.
    pub reliable: bool,
}

/// Exit experiment result.
#[derive(Clone, Debug)]
pub struct EscapeCheckResult {
    pub delta: f64,
    pub c0: f64,
    pub phi_a: f64,
    pub w_end_minus: f64,
    pub w_end_plus: f64,
    pub levels: Vec<EscapeLevelCheck>,
    pub stats: EscapeStats,
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

/// Exit-time experiment: sample escapes at each noise level and compare the
/// measured exponent, exit locations, and exit classes against the
/// minimized action at the tube ends.
pub fn run_escape_check(cfg: &ExperimentConfig) -> Result<EscapeCheckResult> {
    if cfg.delta_list.len() != 1 {
        return Err(Error::Config(format!(
            "the exit experiment runs at exactly one strength; got {} entries",
            cfg.delta_list.len()
        )));
    }
    if cfg.escape_epsilons.is_empty() {
        return Err(Error::Config("escape.epsilons is empty".into()));
    }
    let delta = cfg.delta_list[0];
    let sys = make_builtin(&cfg.system)?;
    let setup = setup_delta(&sys, cfg, delta)?;
    let curve = setup.pm.curve_delta();
    let len = curve.length();
    let opts = mam_options(cfg, &sys, delta);

    let mut q = vec![0.0; curve.dim()];
    let mut w_at = |u: f64| -> Result<f64> {
        curve.point_into(wrap(setup.phi_a + u, len), &mut q);
        let target = DVector::from_column_slice(&q);
        Ok(minimize_action(&sys, &setup.pm, &setup.tube, &target, &opts)?.w_mam)
    };
    let w_end_minus = w_at(-cfg.tube_delta1)?;
    let w_end_plus = w_at(cfg.tube_delta2)?;

    let ens_opts = EnsembleOptions {
        n_samples: cfg.escape_n_samples,
        master_seed: cfg.master_seed,
        dt: cfg.escape_dt,
        max_time: cfg.escape_max_time,
        ..EnsembleOptions::default()
    };
    let stats = escape_ensemble(
        &sys,
        &setup.pm,
        &setup.tube,
        &cfg.escape_epsilons,
        &ens_opts,
    )?;

    let n = cfg.escape_n_samples;
    let levels: Vec<EscapeLevelCheck> = stats
        .per_epsilon
        .iter()
        .enumerate()
        .map(|(ei, s)| {
            let w_exit = if s.class_counts[2] >= s.class_counts[1] {
                if s.class_counts[2] == s.class_counts[1] {
                    w_end_minus.min(w_end_plus)
                } else {
                    w_end_plus
                }
            } else {
                w_end_minus
            };
            let rel_err = (s.eps_log_mean - w_exit).abs() / w_exit;
            let batch = &stats.records[ei * n..(ei + 1) * n];
            let exits = batch.iter().filter(|r| !r.truncated).count();
            let near = batch
                .iter()
                .filter(|r| !r.truncated)
                .filter(|r| {
                    let u = wrap_signed(r.exit_phase - setup.phi_a, len);
                    (u - cfg.tube_delta2).abs() <= END_ARC || (u + cfg.tube_delta1).abs() <= END_ARC
                })
                .count();
            let near_end_fraction = near as f64 / exits.max(1) as f64;
            let end_exits = s.class_counts[1] + s.class_counts[2];
            let truncated_fraction = s.truncated as f64 / s.count as f64;
            let reliable = truncated_fraction <= 0.05;
            EscapeLevelCheck {
                epsilon: s.epsilon,
                eps_log_mean: s.eps_log_mean,
                w_exit,
                rel_err,
                exponent_ok: reliable && rel_err <= EXPONENT_TOL,
                near_end_fraction,
                location_ok: near_end_fraction >= END_FRACTION && exits > 0,
                end_exits,
                lateral_exits: s.class_counts[0],
                domination_ok: end_exits > s.class_counts[0],
                truncated_fraction,
                reliable,
            }
        })
        .collect();
    let passed = levels
        .iter()
        .all(|l| l.exponent_ok && l.location_ok && l.domination_ok);

    let files = emit_escape_report(
        cfg,
        delta,
        &setup,
        w_end_minus,
        w_end_plus,
        &stats,
        &levels,
        passed,
    )?;
    Ok(EscapeCheckResult {
        delta,
        c0: setup.tube.c0,
        phi_a: setup.phi_a,
        w_end_minus,
        w_end_plus,
        levels,
        stats,
        passed,
        files,
    })
}

#[allow(clippy::too_many_arguments)]
fn emit_escape_report(
    cfg: &ExperimentConfig,
    delta: f64,
    setup: &DeltaSetup,
    w_end_minus: f64,
    w_end_plus: f64,
    stats: &EscapeStats,
    levels: &[EscapeLevelCheck],
    passed: bool,
) -> Result<Vec<PathBuf>> {
    let len = setup.pm.curve_delta().length();
    let mut files = Vec::new();

    let run_rows: Vec<String> = stats
        .records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.seed,
                fmt_f64(r.epsilon),
                fmt_f64(r.exit_time),
                fmt_f64(r.exit_phase),
                r.boundary_class,
                r.truncated
            )
        })
        .collect();
    files.push(write_csv(
        &cfg.out_dir.join("escape_runs.csv"),
        "seed,epsilon,exit_time,exit_phase,class,truncated",
        &run_rows,
    )?);

    let stat_rows: Vec<String> = stats
        .per_epsilon
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                fmt_f64(s.epsilon),
                s.count,
                s.truncated,
                fmt_f64(s.mean_exit_time),
                fmt_f64(s.eps_log_mean),
                fmt_f64(s.mean_ci.0),
                fmt_f64(s.mean_ci.1),
                fmt_f64(s.eps_log_ci.0),
                fmt_f64(s.eps_log_ci.1),
                s.class_counts[0],
                s.class_counts[1],
                s.class_counts[2]
            )
        })
        .collect();
    files.push(write_csv(
        &cfg.out_dir.join("escape_stats.csv"),
        "epsilon,count,truncated,mean_exit_time,eps_log_mean,mean_ci_lo,mean_ci_hi,\
         eps_log_ci_lo,eps_log_ci_hi,lateral,end_minus,end_plus",
        &stat_rows,
    )?);

    let mut hist_rows = Vec::new();
    for s in &stats.per_epsilon {
        let bins = s.phase_histogram.len();
        for (bi, &c) in s.phase_histogram.iter().enumerate() {
            hist_rows.push(format!(
                "{},{},{},{},{}",
                fmt_f64(s.epsilon),
                bi,
                fmt_f64(len * bi as f64 / bins as f64),
                fmt_f64(len * (bi + 1) as f64 / bins as f64),
                c
            ));
        }
    }
    files.push(write_csv(
        &cfg.out_dir.join("exit_histogram.csv"),
        "epsilon,bin,phase_lo,phase_hi,count",
        &hist_rows,
    )?);

    let labels: Vec<String> = stats
        .per_epsilon
        .iter()
        .map(|s| format!("eps {}", s.epsilon))
        .collect();
    let counts: Vec<Vec<usize>> = stats
        .per_epsilon
        .iter()
        .map(|s| s.phase_histogram.clone())
        .collect();
    let marks = vec![
        (wrap(setup.phi_a - cfg.tube_delta1, len), "end-".to_string()),
        (wrap(setup.phi_a + cfg.tube_delta2, len), "end+".to_string()),
        (wrap(setup.phi_a, len), "A".to_string()),
    ];
    let svg = svg_histogram(&labels, &counts, len, "exit phase", &marks);
    files.push(write_text(&cfg.out_dir.join("escape.svg"), &svg)?);

    let mut s = String::new();
    s.push_str("exit-time check\n");
    s.push_str(&format!("system: {}\n", system_label(&cfg.system)));
    s.push_str(&format!(
        "delta: {delta}  c0: {}  stable phase: {:.6}\n",
        setup.tube.c0, setup.phi_a
    ));
    s.push_str(&format!(
        "minimized cost to ends: minus {:.6} plus {:.6}\n\n",
        w_end_minus, w_end_plus
    ));
    for l in levels {
        s.push_str(&format!(
            "eps {:<6} exponent {:.4} vs {:.4} (rel {:.3}) {} | near-end {:.1}% {} | \
             ends {} lateral {} {}{}\n",
            l.epsilon,
            l.eps_log_mean,
            l.w_exit,
            l.rel_err,
            if l.exponent_ok { "PASS" } else { "FAIL" },
            100.0 * l.near_end_fraction,
            if l.location_ok { "PASS" } else { "FAIL" },
            l.end_exits,
            l.lateral_exits,
            if l.domination_ok { "PASS" } else { "FAIL" },
            if l.reliable {
                String::new()
            } else {
                format!(" | UNRELIABLE ({:.1}% truncated)", 100.0 * l.truncated_fraction)
            }
        ));
    }
    if !stats.warnings.is_empty() {
        s.push_str("\nwarnings:\n");
        for w in &stats.warnings {
            s.push_str(&format!("  {w}\n"));
        }
    }
    s.push_str(&format!(
        "\nverdict: {} (exponent tol {EXPONENT_TOL}, end arc {END_ARC}, end fraction {END_FRACTION})\n",
        if passed { "PASS" } else { "FAIL" }
    ));
    files.push(write_text(&cfg.out_dir.join("summary.txt"), &s)?);
    Ok(files)
}

/// Plain experiment output with no acceptance thresholds attached.
#[derive(Clone, Debug)]
pub struct InfoResult {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Build the invariant curve at each strength and tabulate its offset.
pub fn run_manifold(cfg: &ExperimentConfig) -> Result<InfoResult> {
    let sys = make_builtin(&cfg.system)?;
    let results: Vec<(f64, Result<PerturbedManifold>)> = cfg
        .delta_list
        .par_iter()
        .map(|&d| (d, relax_to_invariant_curve(&sys, d, &cfg.relax_options())))
        .collect();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (delta, res) in &results {
        match res {
            Ok(pm) => {
                let base_len = pm.base().length();
                let m = cfg.manifold_nodes;
                let mut p = vec![0.0; pm.curve_delta().dim()];
                for j in 0..m {
                    let theta = base_len * j as f64 / m as f64;
                    let off: f64 = pm.offset_row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
                    pm.curve_delta().point_into(wrap(pm.psi_at_node(j), pm.curve_delta().length()), &mut p);
                    rows.push(format!(
                        "{},{},{},{},{}",
                        fmt_f64(*delta),
                        fmt_f64(theta),
                        fmt_f64(pm.psi_at_node(j)),
                        fmt_f64(off),
                        p.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
                    ));
                }
                let phi_a = pm
                    .stable_phase()
                    .map(|sp| format!("{:.6}", sp.phi_a))
                    .unwrap_or_else(|_| "none".into());
                lines.push(format!(
                    "delta {delta}: residual {:.3e} after {} iterations, offset sup {:.3e}, stable phase {phi_a}",
                    pm.residual(),
                    pm.iterations(),
                    pm.offset_sup()
                ));
            }
            Err(e) => lines.push(format!("delta {delta}: FAILED ({e})")),
        }
    }
    let dim = sys.dim();
    let coord_cols: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    let header = format!("delta,theta,psi,offset_norm,{}", coord_cols.join(","));
    let mut files = Vec::new();
    files.push(write_csv(&cfg.out_dir.join("manifold.csv"), &header, &rows)?);
    let text = format!(
        "invariant curve construction\nsystem: {}\n\n{}\n",
        system_label(&cfg.system),
        lines.join("\n")
    );
    files.push(write_text(&cfg.out_dir.join("summary.txt"), &text)?);
    Ok(InfoResult { lines, files })
}

/// Tabulate the reduced quasipotential profile at each strength.
pub fn run_reduced(cfg: &ExperimentConfig) -> Result<InfoResult> {
    let sys = make_builtin(&cfg.system)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for &delta in &cfg.delta_list {
        let pm = relax_to_invariant_curve(&sys, delta, &cfg.relax_options())?;
        let profile = reduced_profile(&pm, 512)?;
        for j in 0..profile.phases.len() {
            rows.push(format!(
                "{},{},{},{},{},{}",
                fmt_f64(delta),
                fmt_f64(profile.phases[j]),
                fmt_f64(profile.u[j]),
                fmt_f64(profile.w_cw[j]),
                fmt_f64(profile.w_ccw[j]),
                fmt_f64(profile.w_min(j))
            ));
        }
        let sp = pm.stable_phase()?;
        let len = pm.curve_delta().length();
        let w_plus =
            one_sided_reduced_cost(&pm, wrap(sp.phi_a + cfg.tube_delta2, len), Direction::Ccw)?;
        let w_minus =
            one_sided_reduced_cost(&pm, wrap(sp.phi_a - cfg.tube_delta1, len), Direction::Cw)?;
        lines.push(format!(
            "delta {delta}: stable phase {:.6}, end costs minus {:.6} plus {:.6}",
            sp.phi_a, w_minus, w_plus
        ));
    }
    let mut files = Vec::new();
    files.push(write_csv(
        &cfg.out_dir.join("reduced.csv"),
        "delta,phase,u,w_cw,w_ccw,w_min",
        &rows,
    )?);
    let text = format!(
        "reduced quasipotential\nsystem: {}\n\n{}\n",
        system_label(&cfg.system),
        lines.join("\n")
    );
    files.push(write_text(&cfg.out_dir.join("summary.txt"), &text)?);
    Ok(InfoResult { lines, files })
}

/// Minimize the action to both tube ends at each strength and dump the
/// optimal paths.
pub fn run_mam(cfg: &ExperimentConfig) -> Result<InfoResult> {
    let sys = make_builtin(&cfg.system)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut files = Vec::new();
    for &delta in &cfg.delta_list {
        let setup = setup_delta(&sys, cfg, delta)?;
        let curve = setup.pm.curve_delta();
        let len = curve.length();
        let opts = mam_options(cfg, &sys, delta);
        let mut q = vec![0.0; curve.dim()];
        for (label, u) in [("end_minus", -cfg.tube_delta1), ("end_plus", cfg.tube_delta2)] {
            curve.point_into(wrap(setup.phi_a + u, len), &mut q);
            let target = DVector::from_column_slice(&q);
            let r = minimize_action(&sys, &setup.pm, &setup.tube, &target, &opts)?;
            let diag = path_diagnostics(&setup.pm, &setup.tube, &r.path, LAYER_COEFF)?;
            rows.push(format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                fmt_f64(delta),
                label,
                r.direction,
                fmt_f64(r.w_red),
                fmt_f64(r.action),
                fmt_f64(r.head_cost),
                fmt_f64(r.w_mam),
                r.iterations,
                fmt_f64(r.grad_norm),
                fmt_f64(diag.sup_dist),
                fmt_f64(diag.sup_speed)
            ));
            let path_rows: Vec<String> = (0..r.path.node_count())
                .map(|i| {
                    format!(
                        "{},{}",
                        fmt_f64(r.path.times()[i]),
                        r.path
                            .point(i)
                            .iter()
                            .map(|x| fmt_f64(*x))
                            .collect::<Vec<_>>()
                            .join(",")
                    )
                })
                .collect();
            let coord_cols: Vec<String> = (0..curve.dim()).map(|k| format!("x{k}")).collect();
            files.push(write_csv(
                &cfg.out_dir.join(format!("mam_path_{delta}_{label}.csv")),
                &format!("time,{}", coord_cols.join(",")),
                &path_rows,
            )?);
            lines.push(format!(
                "delta {delta} {label}: w_mam {:.6} (reduced {:.6}) after {} iterations, \
                 tau1 {:.3}, end class {}",
                r.w_mam, r.w_red, r.iterations, diag.tau1, diag.end_class
            ));
        }
    }
    files.insert(
        0,
        write_csv(
            &cfg.out_dir.join("mam.csv"),
            "delta,target,direction,w_red,action,head_cost,w_mam,iterations,grad_norm,\
             sup_dist,sup_speed",
            &rows,
        )?,
    );
    let text = format!(
        "action minimization\nsystem: {}\n\n{}\n",
        system_label(&cfg.system),
        lines.join("\n")
    );
    files.push(write_text(&cfg.out_dir.join("summary.txt"), &text)?);
    Ok(InfoResult { lines, files })
}

/// Measure contraction and stretch rates along the curve at each strength.
pub fn run_lyapunov(cfg: &ExperimentConfig) -> Result<InfoResult> {
    let sys = make_builtin(&cfg.system)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for &delta in &cfg.delta_list {
        let pm = relax_to_invariant_curve(&sys, delta, &cfg.relax_options())?;
        let rep = lyapunov_type_numbers(&sys, &pm, 10.0 / sys.lambda())?;
        rows.push(format!(
            "{},{},{},{}",
            fmt_f64(delta),
            fmt_f64(rep.nu_rate),
            fmt_f64(rep.tangential_rate),
            fmt_f64(rep.sigma_estimate)
        ));
        lines.push(format!(
            "delta {delta}: normal rate {:.4}, tangential rate {:.4}, sigma {:.4}",
            rep.nu_rate, rep.tangential_rate, rep.sigma_estimate
        ));
    }
    let mut files = Vec::new();
    files.push(write_csv(
        &cfg.out_dir.join("lyapunov.csv"),
        "delta,nu_rate,tangential_rate,sigma_estimate",
        &rows,
    )?);
    let text = format!(
        "contraction rates\nsystem: {}\n\n{}\n",
        system_label(&cfg.system),
        lines.join("\n")
    );
    files.push(write_text(&cfg.out_dir.join("summary.txt"), &text)?);
    Ok(InfoResult { lines, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn test_cfg(text: &str) -> ExperimentConfig {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(text).unwrap();
        cfg.out_dir = dir.path().join("out");
        std::mem::forget(dir);
        cfg
    }

    #[test]
    fn auto_c0_vanishes_the_inner_surface_on_the_fat_ring() {
        // At this strength the reduced end cost is 0.6; radius sqrt(0.3)
        // leaves an inner surface with barrier ~0.32, radius 2 sqrt(0.3)
        // exceeds the curve radius so only the outer surface remains.
        let sys = make_builtin(&BuiltinSystem::Ring { kappa: 0.0 }).unwrap();
        let pm = relax_to_invariant_curve(&sys, 0.3, &Default::default()).unwrap();
        let (c0, inf, threshold) = auto_c0(&sys, &pm, PI / 2.0, PI / 2.0).unwrap();
        assert_eq!(c0, 2.0);
        assert!((threshold - 1.2).abs() < 1e-2, "threshold {threshold}");
        assert!(inf >= threshold, "inf {inf} threshold {threshold}");
    }

    #[test]
    fn empty_delta_list_is_a_config_error() {
        assert!(matches!(
            parse_config("delta_list ="),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn escape_check_requires_one_strength_and_noise_levels() {
        let cfg = test_cfg("delta_list = 0.2, 0.1");
        assert!(matches!(run_escape_check(&cfg), Err(Error::Config(_))));
        let cfg = test_cfg("delta_list = 0.3\nescape.epsilons =");
        assert!(matches!(run_escape_check(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn loglog_fit_recovers_a_cubic() {
        let deltas: [f64; 4] = [0.4, 0.2, 0.1, 0.05];
        let gaps: Vec<f64> = deltas.iter().map(|d| 3.0 * d.powi(3)).collect();
        let (slope, intercept, residuals) = loglog_fit(&deltas, &gaps);
        assert!((slope - 3.0).abs() < 1e-12);
        assert!((intercept - 3.0f64.ln()).abs() < 1e-12);
        assert!(residuals.iter().all(|r| r.abs() < 1e-12));
        // One failed strength drops out of the fit without poisoning it.
        let with_nan = [gaps[0], f64::NAN, gaps[2], gaps[3]];
        let (slope, _, _) = loglog_fit(&deltas, &with_nan);
        assert!((slope - 3.0).abs() < 1e-12);
    }

    #[test]
    fn manifold_and_lyapunov_pipelines_emit_files() {
        let cfg = test_cfg("delta_list = 0.1\nmanifold.nodes = 64");
        let res = run_manifold(&cfg).unwrap();
        assert!(cfg.out_dir.join("manifold.csv").exists());
        assert!(res.lines[0].contains("stable phase"));
        let text = std::fs::read_to_string(cfg.out_dir.join("manifold.csv")).unwrap();
        assert!(text.starts_with("delta,theta,psi,offset_norm,x0,x1\n"));
        assert_eq!(text.lines().count(), 65);

        let res = run_lyapunov(&cfg).unwrap();
        assert!(cfg.out_dir.join("lyapunov.csv").exists());
        assert!(res.lines[0].contains("normal rate"));
    }

    #[test]
    fn reduced_pipeline_reports_the_analytic_end_costs() {
        let cfg = test_cfg("delta_list = 0.1\nmanifold.nodes = 256");
        let res = run_reduced(&cfg).unwrap();
        // Quarter-turn ends on the plain ring cost 2 delta each way.
        assert!(res.lines[0].contains("minus 0.2000") && res.lines[0].contains("plus 0.2000"));
        let text = std::fs::read_to_string(cfg.out_dir.join("reduced.csv")).unwrap();
        assert_eq!(text.lines().count(), 513);
    }
}
