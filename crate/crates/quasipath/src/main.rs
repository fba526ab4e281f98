use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quasipath::harness::{
    load_config, run_escape_check, run_lyapunov, run_mam, run_manifold, run_reduced,
    run_theorem_check, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "quasipath",
    about = "Quasipotentials for gradient systems with a weak swirl along an attracting loop",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file (flat key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides output.dir from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides master_seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the invariant curve at each strength.
    Manifold,
    /// Tabulate the reduced quasipotential along the curve.
    Reduced,
    /// Minimize the action to the tube ends and dump optimal paths.
    Mam,
    /// Sample noisy exit times and locations from the tube.
    Escape,
    /// Gap-scaling experiment: minimized action versus reduced cost.
    TheoremCheck,
    /// Contraction and stretch rates along the curve.
    Lyapunov,
}

fn load(cli: &Cli) -> quasipath::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> quasipath::Result<bool> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Manifold => {
            let r = run_manifold(&cfg)?;
            print_info(&r.lines, &r.files);
            Ok(true)
        }
        Command::Reduced => {
            let r = run_reduced(&cfg)?;
            print_info(&r.lines, &r.files);
            Ok(true)
        }
        Command::Mam => {
            let r = run_mam(&cfg)?;
            print_info(&r.lines, &r.files);
            Ok(true)
        }
        Command::Escape => {
            let r = run_escape_check(&cfg)?;
            for l in &r.levels {
                println!(
                    "eps {}: exponent {:.4} vs {:.4} ({})",
                    l.epsilon,
                    l.eps_log_mean,
                    l.w_exit,
                    if l.exponent_ok && l.location_ok && l.domination_ok {
                        "PASS"
                    } else {
                        "FAIL"
                    }
                );
            }
            for w in &r.stats.warnings {
                eprintln!("warning: {w}");
            }
            print_files(&r.files);
            Ok(r.passed)
        }
        Command::TheoremCheck => {
            let r = run_theorem_check(&cfg)?;
            for s in &r.fit.series {
                println!("{}: slope {:.3}", s.label, s.slope);
            }
            for f in &r.fit.failures {
                eprintln!("warning: {f}");
            }
            print_files(&r.files);
            Ok(r.passed)
        }
        Command::Lyapunov => {
            let r = run_lyapunov(&cfg)?;
            print_info(&r.lines, &r.files);
            Ok(true)
        }
    }
}

fn print_info(lines: &[String], files: &[PathBuf]) {
    for l in lines {
        println!("{l}");
    }
    print_files(files);
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
