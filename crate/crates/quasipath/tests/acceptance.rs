//! End to end acceptance checks. Each test prints one verdict line with the
//! measured numbers (visible under `--nocapture`) before asserting, so the
//! evidence survives a failure.

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;

use quasipath::action::{
    action, action_gradient, el_residual, minimize_action, MamOptions, SpacePath,
};
use quasipath::geometry::{DiscretizedCurve, TubeSpec};
use quasipath::harness::{
    run_escape_check, run_theorem_check, EscapeCheckResult, ExperimentConfig, TheoremCheckResult,
};
use quasipath::manifold::{
    lyapunov_type_numbers, relax_to_invariant_curve, PerturbedManifold, RelaxOptions,
};
use quasipath::model::{make_builtin, BuiltinSystem, SystemModel};
use quasipath::numerics::{fit_line, wrap, wrap_signed};
use quasipath::reduced_qp::reduced_quasipotential;
use quasipath::rng::Stream;

const PROJ_REL_TOL: f64 = 1e-5;
const CLOSED_FORM_TOL: f64 = 1e-9;
const RADIUS_RATIO: (f64, f64) = (3.0, 5.0);
const FLAT_OFFSET_SUP: f64 = 1e-8;
const DRIFT_SLOPE_MIN: f64 = 1.8;
const ORACLE_TOL: f64 = 1e-8;
const GRAD_REL_TOL: f64 = 1e-6;
const EL_RMS_COEFF: f64 = 1e-3;
const BOUND_SLACK: f64 = 1e-8;
const SLOPE_MIN: f64 = 2.0;
const GAP_FLOOR: f64 = 1e-6;
const DIST_HALVING_FACTOR: f64 = 1.6;
const SPEED_RATIO_BOUND: f64 = 3.0;
const MIN_EXIT_SAMPLES: usize = 500;
const NU_TOL: f64 = 0.05;
const TANGENTIAL_TOL: f64 = 0.02;

fn v2(x: f64, y: f64) -> DVector<f64> {
    DVector::from_vec(vec![x, y])
}

fn ring(kappa: f64) -> SystemModel {
    make_builtin(&BuiltinSystem::Ring { kappa }).unwrap()
}

fn relax(sys: &SystemModel, delta: f64) -> PerturbedManifold {
    relax_to_invariant_curve(sys, delta, &RelaxOptions::default()).unwrap()
}

fn out_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn scaling_config(kappa: f64, dir: &str) -> ExperimentConfig {
    ExperimentConfig {
        system: BuiltinSystem::Ring { kappa },
        out_dir: out_dir(dir),
        ..ExperimentConfig::default()
    }
}

fn exit_config(dir: &str) -> ExperimentConfig {
    ExperimentConfig {
        system: BuiltinSystem::Ring { kappa: 0.0 },
        delta_list: vec![0.3],
        out_dir: out_dir(dir),
        ..ExperimentConfig::default()
    }
}

/// Criteria 6, 7 and 10 read the same forced-ring scaling study.
fn forced_scaling() -> &'static TheoremCheckResult {
    static RUN: OnceLock<TheoremCheckResult> = OnceLock::new();
    RUN.get_or_init(|| {
        run_theorem_check(&scaling_config(1.0, "acceptance_scaling"))
            .expect("forced ring scaling study")
    })
}

/// Criteria 8 and 10 read the same exit ensemble.
fn exit_study() -> &'static EscapeCheckResult {
    static RUN: OnceLock<EscapeCheckResult> = OnceLock::new();
    RUN.get_or_init(|| {
        run_escape_check(&exit_config("acceptance_escape")).expect("exit ensemble")
    })
}

fn verdict(label: &str, pass: bool, detail: &str) {
    println!(
        "criterion {label}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

#[test]
fn projection_derivative_matches_central_differences() {
    let t0 = Instant::now();
    let origin = v2(0.0, 0.0);
    let circle =
        DiscretizedCurve::circle(&origin, 1.0, &v2(1.0, 0.0), &v2(0.0, 1.0), 512).unwrap();
    let closed = circle
        .projection_derivative(&v2(1.5, 0.0), &v2(0.0, 1.0))
        .unwrap();
    let closed_err = (closed - 2.0 / 3.0).abs();

    let ring_curve = ring(0.0).stationary_curve().clone();
    let ellipse = make_builtin(&BuiltinSystem::Ellipse { a: 1.5, alpha: 0.5 }).unwrap();
    let ellipse_curve = ellipse.stationary_curve().clone();

    let mut stream = Stream::new(11);
    let mut worst = 0.0f64;
    for curve in [&ring_curve, &ellipse_curve] {
        let len = curve.length();
        let reach = 0.4 * curve.injectivity_radius();
        for _ in 0..100 {
            let phase = stream.next_in(0.0, len);
            let off = stream.next_in(-reach, reach);
            let q = curve.point(phase);
            let t = curve.tangent(phase);
            let y = v2(q[0] - off * t[1], q[1] + off * t[0]);
            let ang = stream.next_in(0.0, std::f64::consts::TAU);
            let beta = v2(ang.cos(), ang.sin());
            let d = curve.projection_derivative(&y, &beta).unwrap();
            let h = 1e-6;
            let plus = curve.project(&(&y + &beta * h)).unwrap().phase;
            let minus = curve.project(&(&y - &beta * h)).unwrap().phase;
            let fd = wrap_signed(plus - minus, len) / (2.0 * h);
            worst = worst.max((d - fd).abs() / d.abs().max(1.0));
        }
    }

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = closed_err <= CLOSED_FORM_TOL && worst <= PROJ_REL_TOL && elapsed < 1.0;
    verdict(
        "01 projection calculus",
        pass,
        &format!(
            "closed form err {closed_err:.1e}, worst fd rel err {worst:.1e} over 200 points, t={elapsed:.2}s"
        ),
    );
    assert!(closed_err <= CLOSED_FORM_TOL, "closed form value {closed}");
    assert!(worst <= PROJ_REL_TOL, "relative error {worst:.3e}");
    assert!(elapsed < 1.0, "took {elapsed:.2}s");
}

#[test]
fn invariant_curve_persists_with_quadratic_residual() {
    let t0 = Instant::now();
    let sys = ring(1.0);
    let radius_residual = |delta: f64| -> f64 {
        let pm = relax(&sys, delta);
        let curve = pm.curve_delta();
        let first_order = 1.0 + delta / 2.0;
        (0..curve.node_count())
            .map(|j| (curve.node(j).norm() - first_order).abs())
            .fold(0.0, f64::max)
    };
    let coarse = radius_residual(0.08);
    let fine = radius_residual(0.04);
    let ratio = coarse / fine;
    let flat_sup = relax(&ring(0.0), 0.1).offset_sup();

    let elapsed = t0.elapsed().as_secs_f64();
    let ratio_ok = (RADIUS_RATIO.0..=RADIUS_RATIO.1).contains(&ratio);
    let pass = ratio_ok && flat_sup <= FLAT_OFFSET_SUP && elapsed < 30.0;
    verdict(
        "02 manifold persistence",
        pass,
        &format!(
            "radius residual ratio {ratio:.2} ({coarse:.2e} over {fine:.2e}), tangential forcing offset sup {flat_sup:.1e}, t={elapsed:.1}s"
        ),
    );
    assert!(ratio_ok, "residual ratio {ratio:.3}");
    assert!(flat_sup <= FLAT_OFFSET_SUP, "offset sup {flat_sup:.3e}");
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
}

#[test]
fn reduced_drift_error_scales_quadratically() {
    let t0 = Instant::now();
    let sys = ring(1.0);
    let mut log_delta = Vec::new();
    let mut log_sup = Vec::new();
    for &delta in &[0.02f64, 0.04, 0.08] {
        let pm = relax(&sys, delta);
        let mut sup = 0.0f64;
        for j in 0..256 {
            let theta = std::f64::consts::TAU * j as f64 / 256.0;
            sup = sup.max((pm.b_tilde(theta) - pm.b(theta)).abs());
        }
        log_delta.push(delta.ln());
        log_sup.push(sup.ln());
    }
    let (slope, _) = fit_line(&log_delta, &log_sup);

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = slope >= DRIFT_SLOPE_MIN && elapsed < 30.0;
    verdict(
        "03 drift comparison",
        pass,
        &format!("sup drift error slope {slope:.2} over three strengths, t={elapsed:.1}s"),
    );
    assert!(slope >= DRIFT_SLOPE_MIN, "slope {slope:.3}");
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
}

#[test]
fn reduced_costs_match_the_analytic_ring_values() {
    let t0 = Instant::now();
    let pm = relax(&ring(0.0), 0.1);
    let pi = std::f64::consts::PI;
    let crossing = reduced_quasipotential(&pm, pi).unwrap().w_red;
    let unstable = reduced_quasipotential(&pm, 1.5 * pi).unwrap().w_red;
    let crossing_err = (crossing - 0.2).abs();
    let unstable_err = (unstable - 0.4).abs();

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = crossing_err <= ORACLE_TOL && unstable_err <= ORACLE_TOL && elapsed < 1.0;
    verdict(
        "04 reduced oracle",
        pass,
        &format!(
            "quarter turn cost err {crossing_err:.1e}, unstable point err {unstable_err:.1e}, t={elapsed:.2}s"
        ),
    );
    assert!(crossing_err <= ORACLE_TOL, "cost {crossing}");
    assert!(unstable_err <= ORACLE_TOL, "cost {unstable}");
    assert!(elapsed < 1.0, "took {elapsed:.2}s");
}

#[test]
fn action_calculus_is_variationally_consistent() {
    let t0 = Instant::now();
    let delta = 0.1;
    let sys = ring(1.0);
    let pm = relax(&sys, delta);
    let phi_a = pm.stable_phase().unwrap().phi_a;
    let curve = pm.curve_delta();
    let len = curve.length();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let tube = TubeSpec {
        c0: 2.0,
        delta,
        delta1: half_pi,
        delta2: half_pi,
        phi_a,
    };

    // Exact discrete gradient against central differences on a wobbled arc.
    let m = 240usize;
    let horizon = 6.0;
    let mut times = Vec::with_capacity(m);
    let mut pts = Vec::with_capacity(2 * m);
    for j in 0..m {
        let s = j as f64 / (m - 1) as f64;
        times.push(horizon * s);
        let phase = wrap(phi_a + s * half_pi, len);
        let q = curve.point(phase);
        let t = curve.tangent(phase);
        let bump = 0.05 * (std::f64::consts::PI * s).sin();
        pts.push(q[0] - bump * t[1]);
        pts.push(q[1] + bump * t[0]);
    }
    let path = SpacePath::new(times.clone(), pts.clone(), 2, delta).unwrap();
    let grad = action_gradient(&sys, &path);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for probe in 0..24 {
        let j = 1 + probe * (m - 2) / 24;
        let k = probe % 2;
        let idx = j * 2 + k;
        let mut up = pts.clone();
        up[idx] += h;
        let mut down = pts.clone();
        down[idx] -= h;
        let a_up = action(&sys, &SpacePath::new(times.clone(), up, 2, delta).unwrap());
        let a_down = action(&sys, &SpacePath::new(times.clone(), down, 2, delta).unwrap());
        let fd = (a_up - a_down) / (2.0 * h);
        let g = grad[(j - 1) * 2 + k];
        worst_rel = worst_rel.max((g - fd).abs() / g.abs().max(1.0));
    }

    // Converged minimizers: stationarity defect and the crawl upper bound.
    let opts = MamOptions::default();
    let end = minimize_action(
        &sys,
        &pm,
        &tube,
        &curve.point(wrap(phi_a + half_pi, len)),
        &opts,
    )
    .unwrap();
    let interior = minimize_action(
        &sys,
        &pm,
        &tube,
        &curve.point(wrap(phi_a - 0.5 * half_pi, len)),
        &opts,
    )
    .unwrap();
    let rms = el_residual(&sys, &end.path)
        .rms
        .max(el_residual(&sys, &interior.path).rms);
    let bound_gap = (end.w_mam - end.w_red).max(interior.w_mam - interior.w_red);

    let elapsed = t0.elapsed().as_secs_f64();
    let grad_ok = worst_rel <= GRAD_REL_TOL;
    let el_ok = rms <= EL_RMS_COEFF * delta;
    let bound_ok = bound_gap <= BOUND_SLACK;
    let pass = grad_ok && el_ok && bound_ok && elapsed < 120.0;
    verdict(
        "05 variational consistency",
        pass,
        &format!(
            "gradient rel err {worst_rel:.1e}, stationarity rms {rms:.1e} vs {:.0e}, crawl bound slack {bound_gap:.1e}, t={elapsed:.1}s",
            EL_RMS_COEFF * delta
        ),
    );
    assert!(grad_ok, "gradient relative error {worst_rel:.3e}");
    assert!(el_ok, "stationarity rms {rms:.3e}");
    assert!(bound_ok, "minimizer exceeds the crawl cost by {bound_gap:.3e}");
    assert!(elapsed < 120.0, "took {elapsed:.1}s");
}

#[test]
fn cost_gap_scaling_matches_the_reduction() {
    let t0 = Instant::now();
    let forced = forced_scaling();
    let min_slope = forced
        .fit
        .series
        .iter()
        .map(|s| s.slope)
        .fold(f64::INFINITY, f64::min);
    let slopes_ok = forced.fit.failures.is_empty() && min_slope >= SLOPE_MIN;

    let flat = run_theorem_check(&scaling_config(0.0, "acceptance_scaling_flat"))
        .expect("flat ring scaling study");
    let max_gap = flat
        .rows
        .iter()
        .map(|r| r.gap)
        .filter(|g| g.is_finite())
        .fold(0.0, f64::max);
    let floor_ok = flat.fit.failures.is_empty()
        && flat
            .rows
            .iter()
            .all(|r| r.gap.is_finite() && r.gap <= GAP_FLOOR);

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = slopes_ok && floor_ok && elapsed < 600.0;
    verdict(
        "06 reduction scaling",
        pass,
        &format!(
            "forced ring min slope {min_slope:.3} (need {SLOPE_MIN}), flat ring max gap {max_gap:.3e} vs floor {GAP_FLOOR:.0e}, t={elapsed:.1}s"
        ),
    );
    assert!(slopes_ok, "min slope {min_slope:.3}");
    assert!(
        floor_ok,
        "flat ring cost gap {max_gap:.3e} exceeds the {GAP_FLOOR:.0e} optimizer floor; the free \
         two dimensional minimizer dips inside the ring and undercuts the on curve cost at \
         cubic order, so the gap scales as delta cubed instead of vanishing"
    );
    assert!(elapsed < 600.0, "took {elapsed:.1}s");
}

#[test]
fn minimizers_stay_confined_to_the_tube() {
    let t0 = Instant::now();
    let run = forced_scaling();
    let all_ok = run.rows.iter().all(|r| r.status == "ok");
    let contained = run
        .rows
        .iter()
        .all(|r| r.sup_dist <= r.c0 * r.delta.sqrt());

    // Rows arrive grouped per strength; follow each target down the grid.
    let labels = ["end_minus", "end_plus", "interior_a", "interior_b", "interior_c"];
    let mut min_ratio = f64::INFINITY;
    for label in labels {
        let dists: Vec<f64> = run
            .rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.sup_dist)
            .collect();
        for w in dists.windows(2) {
            min_ratio = min_ratio.min(w[0] / w[1]);
        }
    }
    let max_speed = run
        .rows
        .iter()
        .map(|r| r.speed_ratio)
        .fold(0.0, f64::max);

    let elapsed = t0.elapsed().as_secs_f64();
    let pass =
        all_ok && contained && min_ratio >= DIST_HALVING_FACTOR && max_speed <= SPEED_RATIO_BOUND;
    verdict(
        "07 path confinement",
        pass,
        &format!(
            "all targets converged {all_ok}, worst halving factor {min_ratio:.2} (need {DIST_HALVING_FACTOR}), sup speed over sqrt delta {max_speed:.2} (bound {SPEED_RATIO_BOUND}), t={elapsed:.1}s"
        ),
    );
    assert!(all_ok, "a target failed");
    assert!(contained, "a minimizer left its tube");
    assert!(min_ratio >= DIST_HALVING_FACTOR, "factor {min_ratio:.3}");
    assert!(max_speed <= SPEED_RATIO_BOUND, "speed ratio {max_speed:.3}");
}

#[test]
fn exit_times_and_locations_match_the_minimized_cost() {
    let t0 = Instant::now();
    let run = exit_study();
    let enough = run
        .stats
        .per_epsilon
        .iter()
        .all(|p| p.count >= MIN_EXIT_SAMPLES);
    let mut detail = String::new();
    for lv in &run.levels {
        detail.push_str(&format!(
            "eps {:.2}: exponent {:.3} vs cost {:.3} (rel {:.0}%), near ends {:.0}%, end/lateral {}/{}; ",
            lv.epsilon,
            lv.eps_log_mean,
            lv.w_exit,
            100.0 * lv.rel_err,
            100.0 * lv.near_end_fraction,
            lv.end_exits,
            lv.lateral_exits,
        ));
    }

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = run.passed && enough && elapsed < 900.0;
    verdict("08 exit times", pass, &format!("{detail}t={elapsed:.1}s"));
    assert!(enough, "fewer than {MIN_EXIT_SAMPLES} samples at some level");
    for lv in &run.levels {
        assert!(
            lv.reliable && lv.exponent_ok,
            "exponent off at eps {}: rel {:.3}",
            lv.epsilon,
            lv.rel_err
        );
        assert!(
            lv.location_ok,
            "exit locations stray at eps {}: near end fraction {:.2}",
            lv.epsilon,
            lv.near_end_fraction
        );
        assert!(lv.domination_ok, "lateral exits dominate at eps {}", lv.epsilon);
    }
    assert!(run.passed);
    assert!(elapsed < 900.0, "took {elapsed:.1}s");
}

#[test]
fn linearized_rates_recover_the_design_constants() {
    let t0 = Instant::now();
    let sys = ring(0.0);
    let pm = relax(&sys, 0.0);
    let flat = lyapunov_type_numbers(&sys, &pm, 10.0 / sys.lambda()).unwrap();
    let sys3 = make_builtin(&BuiltinSystem::Ring3d {
        kappa: 0.0,
        beta: 0.5,
    })
    .unwrap();
    let pm3 = relax(&sys3, 0.0);
    let three = lyapunov_type_numbers(&sys3, &pm3, 10.0 / sys3.lambda()).unwrap();

    let elapsed = t0.elapsed().as_secs_f64();
    let nu_ok = (flat.nu_rate + 2.0).abs() <= NU_TOL && (three.nu_rate + 1.0).abs() <= NU_TOL;
    let tan_ok = flat.tangential_rate.abs() <= TANGENTIAL_TOL
        && three.tangential_rate.abs() <= TANGENTIAL_TOL;
    let pass = nu_ok && tan_ok && elapsed < 10.0;
    verdict(
        "09 hyperbolicity rates",
        pass,
        &format!(
            "ring nu {:.3}, ring3d nu {:.3}, tangential rates {:.1e} and {:.1e}, t={elapsed:.1}s",
            flat.nu_rate, three.nu_rate, flat.tangential_rate, three.tangential_rate
        ),
    );
    assert!(nu_ok, "normal rates {} and {}", flat.nu_rate, three.nu_rate);
    assert!(
        tan_ok,
        "tangential rates {} and {}",
        flat.tangential_rate, three.tangential_rate
    );
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let t0 = Instant::now();
    let scaling_first = forced_scaling();
    let scaling_again = run_theorem_check(&scaling_config(1.0, "acceptance_scaling_repeat"))
        .expect("repeat scaling study");
    let exits_first = exit_study();
    let exits_again =
        run_escape_check(&exit_config("acceptance_escape_repeat")).expect("repeat exit ensemble");

    fn csv(files: &[PathBuf], name: &str) -> Vec<u8> {
        let p = files
            .iter()
            .find(|p| p.file_name().map_or(false, |f| f == name))
            .unwrap_or_else(|| panic!("{name} missing from the emitted files"));
        fs::read(p).unwrap()
    }

    let mut all_equal = true;
    let mut detail = String::new();
    for (first, again, name) in [
        (&scaling_first.files, &scaling_again.files, "scaling.csv"),
        (&exits_first.files, &exits_again.files, "escape_runs.csv"),
        (&exits_first.files, &exits_again.files, "escape_stats.csv"),
        (&exits_first.files, &exits_again.files, "exit_histogram.csv"),
    ] {
        let a = csv(first, name);
        let b = csv(again, name);
        let same = a == b;
        all_equal &= same;
        detail.push_str(&format!(
            "{name} {} ({} bytes); ",
            if same { "identical" } else { "DIFFERS" },
            a.len()
        ));
    }

    let elapsed = t0.elapsed().as_secs_f64();
    verdict("10 determinism", all_equal, &format!("{detail}t={elapsed:.1}s"));
    assert!(all_equal, "{detail}");
}
