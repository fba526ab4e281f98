//! Flat key/value experiment configuration.
//!
//! The format is one `key = value` pair per line with dotted section names
//! (`system.name`, `mam.gtol`, ...), `#` comments, and blank lines. Every
//! key has a default; unknown keys are rejected so typos surface instead of
//! silently running with defaults.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifold::RelaxOptions;
use crate::model::BuiltinSystem;

/// Everything the command-line experiments need.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub system: BuiltinSystem,
    /// Perturbation strengths, strictly decreasing.
    pub delta_list: Vec<f64>,
    /// Lateral tube constant; `None` selects it automatically.
    pub tube_c0: Option<f64>,
    /// Phase half-window below the stable point.
    pub tube_delta1: f64,
    /// Phase half-window above the stable point.
    pub tube_delta2: f64,
    pub manifold_nodes: usize,
    pub manifold_tol: f64,
    pub manifold_max_iters: usize,
    /// Path node count for action minimization.
    pub mam_n: usize,
    /// Horizon control: 0 keeps the natural crawl horizon, a positive
    /// value multiplies `(4/lambda) |log delta| / delta`.
    pub mam_t_factor: f64,
    pub mam_gtol: f64,
    pub mam_max_iters: usize,
    pub escape_epsilons: Vec<f64>,
    pub escape_n_samples: usize,
    /// Integrator step for exit sampling; `None` takes `0.01 / lambda`.
    pub escape_dt: Option<f64>,
    pub escape_max_time: f64,
    pub master_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: BuiltinSystem::Ring { kappa: 0.0 },
            delta_list: vec![0.4, 0.2, 0.1, 0.05],
            tube_c0: None,
            tube_delta1: PI / 2.0,
            tube_delta2: PI / 2.0,
            manifold_nodes: 1024,
            manifold_tol: 1e-6,
            manifold_max_iters: 50_000,
            mam_n: 2000,
            mam_t_factor: 0.0,
            mam_gtol: 1e-8,
            mam_max_iters: 50_000,
            escape_epsilons: vec![0.15, 0.10],
            escape_n_samples: 500,
            escape_dt: None,
            escape_max_time: 1e5,
            master_seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn relax_options(&self) -> RelaxOptions {
        RelaxOptions {
            nodes: self.manifold_nodes,
            tol: self.manifold_tol,
            max_iters: self.manifold_max_iters,
            ..RelaxOptions::default()
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_f64(key, s))
        .collect()
}

/// Parse configuration text. Missing keys take defaults; the assembled
/// configuration is validated before being returned.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
    }

    const KNOWN: &[&str] = &[
        "system.name",
        "system.kappa",
        "system.beta",
        "system.a",
        "system.alpha",
        "delta_list",
        "tube.c0",
        "tube.delta1",
        "tube.delta2",
        "manifold.nodes",
        "manifold.tol",
        "manifold.max_iters",
        "mam.n",
        "mam.t_factor",
        "mam.gtol",
        "mam.max_iters",
        "escape.epsilons",
        "escape.n_samples",
        "escape.dt",
        "escape.max_time",
        "master_seed",
        "output.dir",
    ];
    for key in map.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key {key}")));
        }
    }

    let mut cfg = ExperimentConfig::default();
    let get = |k: &str| map.get(k).map(String::as_str);

    let name = get("system.name").unwrap_or("ring");
    let kappa = get("system.kappa").map(|v| parse_f64("system.kappa", v)).transpose()?;
    let beta = get("system.beta").map(|v| parse_f64("system.beta", v)).transpose()?;
    let a = get("system.a").map(|v| parse_f64("system.a", v)).transpose()?;
    let alpha = get("system.alpha").map(|v| parse_f64("system.alpha", v)).transpose()?;
    cfg.system = match name {
        "ring" => BuiltinSystem::Ring {
            kappa: kappa.unwrap_or(0.0),
        },
        "ring3d" => BuiltinSystem::Ring3d {
            kappa: kappa.unwrap_or(0.0),
            beta: beta.unwrap_or(0.0),
        },
        "ellipse" => BuiltinSystem::Ellipse {
            a: a.unwrap_or(1.5),
            alpha: alpha.unwrap_or(0.5),
        },
        other => {
            return Err(Error::Config(format!(
                "system.name: expected ring, ring3d, or ellipse, got {other:?}"
            )))
        }
    };

    if let Some(v) = get("delta_list") {
        cfg.delta_list = parse_list("delta_list", v)?;
    }
    if let Some(v) = get("tube.c0") {
        cfg.tube_c0 = if v == "auto" {
            None
        } else {
            Some(parse_f64("tube.c0", v)?)
        };
    }
    if let Some(v) = get("tube.delta1") {
        cfg.tube_delta1 = parse_f64("tube.delta1", v)?;
    }
    if let Some(v) = get("tube.delta2") {
        cfg.tube_delta2 = parse_f64("tube.delta2", v)?;
    }
    if let Some(v) = get("manifold.nodes") {
        cfg.manifold_nodes = parse_usize("manifold.nodes", v)?;
    }
    if let Some(v) = get("manifold.tol") {
        cfg.manifold_tol = parse_f64("manifold.tol", v)?;
    }
    if let Some(v) = get("manifold.max_iters") {
        cfg.manifold_max_iters = parse_usize("manifold.max_iters", v)?;
    }
    if let Some(v) = get("mam.n") {
        cfg.mam_n = parse_usize("mam.n", v)?;
    }
    if let Some(v) = get("mam.t_factor") {
        cfg.mam_t_factor = parse_f64("mam.t_factor", v)?;
    }
    if let Some(v) = get("mam.gtol") {
        cfg.mam_gtol = parse_f64("mam.gtol", v)?;
    }
    if let Some(v) = get("mam.max_iters") {
        cfg.mam_max_iters = parse_usize("mam.max_iters", v)?;
    }
    if let Some(v) = get("escape.epsilons") {
        cfg.escape_epsilons = parse_list("escape.epsilons", v)?;
    }
    if let Some(v) = get("escape.n_samples") {
        cfg.escape_n_samples = parse_usize("escape.n_samples", v)?;
    }
    if let Some(v) = get("escape.dt") {
        cfg.escape_dt = if v == "auto" {
            None
        } else {
            Some(parse_f64("escape.dt", v)?)
        };
    }
    if let Some(v) = get("escape.max_time") {
        cfg.escape_max_time = parse_f64("escape.max_time", v)?;
    }
    if let Some(v) = get("master_seed") {
        cfg.master_seed = v
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("master_seed: expected an integer, got {v:?}")))?;
    }
    if let Some(v) = get("output.dir") {
        cfg.out_dir = PathBuf::from(v);
    }

    validate(&cfg)?;
    Ok(cfg)
}

/// Read and parse a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.delta_list.is_empty() {
        return Err(Error::Config("delta_list is empty".into()));
    }
    for d in &cfg.delta_list {
        if !(*d >= 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("delta_list entry {d} is not valid")));
        }
    }
    for w in cfg.delta_list.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Config(
                "delta_list must be strictly decreasing".into(),
            ));
        }
    }
    if let Some(c0) = cfg.tube_c0 {
        if !(c0 > 0.0) {
            return Err(Error::Config(format!("tube.c0 must be positive, got {c0}")));
        }
    }
    for (key, v) in [
        ("tube.delta1", cfg.tube_delta1),
        ("tube.delta2", cfg.tube_delta2),
        ("manifold.tol", cfg.manifold_tol),
        ("mam.gtol", cfg.mam_gtol),
        ("escape.max_time", cfg.escape_max_time),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{key} must be positive, got {v}")));
        }
    }
    if cfg.mam_t_factor < 0.0 || !cfg.mam_t_factor.is_finite() {
        return Err(Error::Config(format!(
            "mam.t_factor must be zero or positive, got {}",
            cfg.mam_t_factor
        )));
    }
    if let Some(dt) = cfg.escape_dt {
        if !(dt > 0.0) {
            return Err(Error::Config(format!(
                "escape.dt must be positive or auto, got {dt}"
            )));
        }
    }
    for e in &cfg.escape_epsilons {
        if !(*e >= 0.0 && e.is_finite()) {
            return Err(Error::Config(format!("escape.epsilons entry {e} is not valid")));
        }
    }
    if cfg.mam_n < 3 {
        return Err(Error::Config(format!("mam.n must be at least 3, got {}", cfg.mam_n)));
    }
    if cfg.manifold_nodes < 16 {
        return Err(Error::Config(format!(
            "manifold.nodes must be at least 16, got {}",
            cfg.manifold_nodes
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_an_empty_config() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.delta_list, vec![0.4, 0.2, 0.1, 0.05]);
        assert!(cfg.tube_c0.is_none());
        assert_eq!(cfg.mam_n, 2000);
        assert_eq!(cfg.master_seed, 1);
    }

    #[test]
    fn sections_comments_and_lists_parse() {
        let text = "
# experiment
system.name = ring
system.kappa = 1.0
delta_list = 0.2, 0.1   # two strengths
tube.c0 = 2.5
escape.epsilons = 0.15,0.10
master_seed = 7
";
        let cfg = parse_config(text).unwrap();
        assert!(matches!(cfg.system, BuiltinSystem::Ring { kappa } if kappa == 1.0));
        assert_eq!(cfg.delta_list, vec![0.2, 0.1]);
        assert_eq!(cfg.tube_c0, Some(2.5));
        assert_eq!(cfg.escape_epsilons, vec![0.15, 0.10]);
        assert_eq!(cfg.master_seed, 7);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            parse_config("delta_list = 0.1, 0.2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(parse_config("delta_list ="), Err(Error::Config(_))));
        assert!(matches!(
            parse_config("mam.gtol = -1e-8"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("tube.radius = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("system.name = torus"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("mam.n = 2\nmam.n = 3"),
            Err(Error::Config(_))
        ));
    }
}
