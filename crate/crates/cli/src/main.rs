use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyrec_core::admissibility::check;
use hyrec_core::harness::{
    self, build_problem, metrics_csv, run_convergence, run_forward, run_noise_sweep, run_single_with, run_synth,
    ExperimentConfig, ReconMode, Study,
};
use hyrec_core::io;
use hyrec_core::recon::{reconstruct, reconstruct_scalar};
use hyrec_core::synthesis::MeasurementSet;
use hyrec_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hyrec", version, about = "Coefficient reconstruction from internal functionals")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write ratio fields, constraint matrices and raw measurements.
    #[arg(long, global = true)]
    dump_intermediates: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the forward problem for every trace.
    Forward,
    /// Synthesize (and optionally perturb) the internal functionals.
    Synth,
    /// Reconstruct the normalized coefficients of the ratio equation.
    Reconstruct {
        /// Read functionals written by `synth` instead of synthesizing.
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
    /// Reconstruct and resolve the gauge for the configured modality.
    Resolve {
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
    /// Evaluate the admissibility margins.
    Check {
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
    /// Run the study named in the configuration.
    Run,
    /// Refinement study over `levels`.
    Convergence,
    /// Noise-stability sweep over `epsilons`.
    NoiseSweep,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn measurements(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<MeasurementSet> {
    match dir {
        Some(d) => io::read_measurements(d),
        None => {
            let mut quiet = cfg.clone();
            quiet.output = None;
            run_synth(&quiet)
        }
    }
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn single(cfg: &ExperimentConfig, dump: bool, dir: Option<&Path>) -> Result<i32> {
    let ms = dir.map(io::read_measurements).transpose()?;
    let (report, _) = run_single_with(cfg, dump, ms)?;
    print!("{}", metrics_csv(&report.metrics));
    if let Some(g) = &report.gauge {
        println!("{}", g.audit.statement);
    }
    print_warnings(&report.warnings);
    Ok(0)
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = load(cli)?;
    let out = cfg.output.clone();
    match &cli.command {
        Command::Forward => {
            let us = run_forward(&cfg)?;
            println!("solved {} forward problems on {:?}", us.len(), cfg.grid.shape);
            Ok(0)
        }
        Command::Synth => {
            let ms = run_synth(&cfg)?;
            println!("synthesized {} functionals, min |H_1| = {:.3e}", ms.len(), ms.min_h1);
            Ok(0)
        }
        Command::Reconstruct { measurements: dir } => {
            let ms = measurements(&cfg, dir.as_deref())?;
            let problem = build_problem(&cfg, None)?;
            let used = ms.select(&(0..problem.functionals.min(ms.len())).collect::<Vec<_>>())?;
            match cfg.mode {
                ReconMode::Scalar => {
                    let (_, t) = reconstruct_scalar(&used, &cfg.recon)?;
                    if let Some(d) = &out {
                        io::write_vector(&d.join("ainvb"), &t)?;
                    }
                    println!("reconstructed a^-1 b from {} functionals", used.len());
                }
                ReconMode::Tensor => {
                    let rec = reconstruct(&used, &cfg.recon)?;
                    if let Some(d) = &out {
                        io::write_tensor(&d.join("alpha"), &rec.alpha_beta.alpha)?;
                        io::write_vector(&d.join("beta"), &rec.alpha_beta.beta)?;
                        io::write_scalar(&d.join("quality"), &rec.alpha_beta.quality)?;
                        if cli.dump_intermediates {
                            for (j, v) in rec.ratios.v.iter().enumerate() {
                                io::write_scalar(&d.join(format!("v_{}", j + 1)), v)?;
                            }
                            for (m, mm) in rec.theta_m.m.iter().enumerate() {
                                io::write_tensor(&d.join(format!("M_{}", m + 1)), mm)?;
                            }
                        }
                    }
                    println!(
                        "reconstructed alpha, beta from {} functionals; {} degenerate points",
                        used.len(),
                        rec.alpha_beta.degenerate.len()
                    );
                }
            }
            Ok(0)
        }
        Command::Resolve { measurements: dir } => single(&cfg, cli.dump_intermediates, dir.as_deref()),
        Command::Check { measurements: dir } => {
            let ms = measurements(&cfg, dir.as_deref())?;
            let report = check(&ms, &cfg.covering, &cfg.thresholds)?;
            print!("{}", report.table());
            if let Some(d) = &out {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("admissibility.json"), report.to_json()?)?;
            }
            Ok(if report.pass || report.covering_pass() { 0 } else { 4 })
        }
        Command::Run => match cfg.study {
            Study::Single => single(&cfg, cli.dump_intermediates, None),
            Study::Convergence => convergence(&cfg),
            Study::NoiseSweep => sweep(&cfg),
        },
        Command::Convergence => {
            let mut c = cfg.clone();
            c.study = Study::Convergence;
            c.validate()?;
            convergence(&c)
        }
        Command::NoiseSweep => {
            let mut c = cfg.clone();
            c.study = Study::NoiseSweep;
            c.validate()?;
            sweep(&c)
        }
    }
}

fn convergence(cfg: &ExperimentConfig) -> Result<i32> {
    let r = run_convergence(cfg)?;
    print!("{}", harness::orders_csv(&r));
    print_warnings(&r.warnings);
    Ok(0)
}

fn sweep(cfg: &ExperimentConfig) -> Result<i32> {
    let r = run_noise_sweep(cfg)?;
    print!("{}", harness::sweep_csv(&r));
    for s in &r.spreads {
        println!("# {}: ratio spread {:.3}", s.quantity, s.spread);
    }
    print_warnings(&r.warnings);
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
