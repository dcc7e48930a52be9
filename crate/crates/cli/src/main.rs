//! Command-line front end for cloak design runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cloak_core::config::RunConfig;
use cloak_core::mesh::save_mesh;
use cloak_core::runs::{self, Setup};
use cloak_core::Result;

#[derive(Parser)]
#[command(name = "cloak", version, about = "Acoustic cloak design under uncertainty")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set physics.k0=3.0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the scattering problems at a design and write the fields.
    Forward {
        /// Design file; the zero design when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Run the inexact Newton optimizer for the configured variant.
    Optimize {
        /// Initial design; zero when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Dominant generalized eigenvalues of the field Hessian per source.
    EigStudy {
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Monte Carlo accuracy of the first- and second-order expansions.
    TaylorStudy {
        #[arg(long)]
        design: Option<PathBuf>,
        /// Sample count; `study.samples` when omitted.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Spread of the scattered field under field samples for several designs.
    RobustnessStudy {
        /// Design files (repeatable). When none are given here or in
        /// `study.designs`, the deterministic and configured variants are optimized first.
        #[arg(long)]
        design: Vec<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Generate the configured mesh and write it to `<out>/mesh.txt`.
    MeshGen,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn design_or_zero(setup: &Setup, path: Option<&Path>) -> Result<Vec<f64>> {
    match path {
        Some(p) => setup.load_design(p),
        None => Ok(setup.zero_design()),
    }
}

fn design_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "design".into())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(out) = cli.common.out {
        config.output.dir = out;
    }
    let out = config.output.dir.clone();
    if let Command::MeshGen = cli.command {
        config.validate()?;
        let mesh = runs::build_mesh(&config)?;
        std::fs::create_dir_all(&out)?;
        save_mesh(&mesh, &out.join("mesh.txt"))?;
        println!("mesh: {} vertices, {} triangles", mesh.vertex_count(), mesh.triangle_count());
        return Ok(());
    }
    let setup = Setup::new(&config)?;
    let dir = out.as_path();
    let out = Some(dir);
    match cli.command {
        Command::Forward { design } => {
            let tau = design_or_zero(&setup, design.as_deref())?;
            let r = runs::run_forward(&setup, &tau, out, "")?;
            for (i, q) in r.q.iter().enumerate() {
                println!("source {i}: Q = {q:.6e}");
            }
        }
        Command::Optimize { design } => {
            let tau = design_or_zero(&setup, design.as_deref())?;
            let r = runs::run_optimize(&setup, &tau, out)?;
            let (first, last) = (r.trace.first(), r.trace.last());
            println!(
                "{}: objective {:.6e} -> {:.6e} in {} iterations ({:?})",
                r.trace.variant,
                first.objective,
                last.objective,
                r.trace.newton_iterations(),
                r.trace.termination
            );
        }
        Command::EigStudy { design } => {
            let tau = design_or_zero(&setup, design.as_deref())?;
            let r = runs::run_eig_study(&setup, &tau, out)?;
            for (i, p) in r.pairs.iter().enumerate() {
                let first = p.values.first().copied().unwrap_or(0.0);
                let last = p.values.last().copied().unwrap_or(0.0);
                println!("source {i}: {} eigenvalues, |first| {:.3e}, |last| {:.3e}", p.len(), first.abs(), last.abs());
            }
            for w in r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::TaylorStudy { design, samples } => {
            let tau = design_or_zero(&setup, design.as_deref())?;
            let m = samples.unwrap_or(setup.config.study.samples);
            for r in runs::run_taylor_study(&setup, &tau, m, out)? {
                let x = &r.row;
                println!(
                    "source {}: mse(Q) {:.3e}, mse(Q-T1) {:.3e}, mse(Q-T2) {:.3e}",
                    r.source, x.mse_q, x.mse_q_t1, x.mse_q_t2
                );
            }
        }
        Command::RobustnessStudy { design, samples } => {
            let m = samples.unwrap_or(setup.config.study.samples);
            let paths = if design.is_empty() { setup.config.study.designs.clone() } else { design };
            let mut designs = vec![("uncloaked".to_string(), setup.zero_design())];
            if paths.is_empty() {
                designs.extend(optimized_designs(&setup, dir)?);
            } else {
                for p in &paths {
                    designs.push((design_name(p), setup.load_design(p)?));
                }
            }
            for r in runs::run_robustness_study(&setup, &designs, m, out)? {
                println!("{} source {}: mean std {:.4e}, E[Q] {:.4e}", r.design, r.source, r.mean_std, r.q_mean);
            }
        }
        Command::MeshGen => unreachable!(),
    }
    Ok(())
}

/// Optimizes the deterministic problem and the configured variant, each in
/// its own subdirectory of `out`.
fn optimized_designs(setup: &Setup, out: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut kinds = vec!["deterministic".to_string()];
    if setup.config.variant.kind != "deterministic" {
        kinds.push(setup.config.variant.kind.clone());
    }
    let mut designs = Vec::new();
    for kind in kinds {
        let mut cfg = setup.config.clone();
        cfg.variant.kind = kind.clone();
        let s = Setup::with_mesh(&cfg, setup.mesh.clone())?;
        let r = runs::run_optimize(&s, &s.zero_design(), Some(&out.join(&kind)))?;
        designs.push((kind, r.tau));
    }
    Ok(designs)
}

