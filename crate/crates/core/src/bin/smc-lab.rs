//! `smc-lab`: validate resampling matrices and run replicated experiments.
//!
//! Exit codes: 0 on success, 1 when a validation or ordering check fails, 2 on
//! usage, parse or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use smc_core::experiments::{self, Experiment};
use smc_core::{ResamplingMatrix, Tolerance};

#[derive(Debug, Parser)]
#[command(name = "smc-lab", version, about = "Resampling-matrix SMC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a triplet-format matrix against a weight vector.
    ValidateMatrix {
        matrix: PathBuf,
        weights: PathBuf,
        /// Relative tolerance for row sums and column weights.
        #[arg(long, default_value_t = 1e-12)]
        rel_tol: f64,
    },
    /// Run every (scheme, N0) pair of a config and write the CSV report.
    Replicate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (defaults to the number of CPUs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Tabulate exact per-step resampling variances on one frozen trajectory.
    CompareSchemes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a replicate report with z-scores against the exact value.
    Report { report: PathBuf },
}

enum Outcome {
    Pass,
    Fail,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_weights(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .map(|tok| tok.parse::<f64>().with_context(|| format!("bad weight `{tok}`")))
        .collect()
}

fn load(config: &Path, seed: Option<u64>) -> Result<Experiment> {
    let exp = Experiment::load(config).with_context(|| format!("loading {}", config.display()))?;
    Ok(match seed {
        Some(s) => exp.with_seed(s),
        None => exp,
    })
}

fn execute(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::ValidateMatrix {
            matrix,
            weights,
            rel_tol,
        } => {
            let m = ResamplingMatrix::from_triplets(&read(&matrix)?)
                .with_context(|| format!("parsing {}", matrix.display()))?;
            let w = parse_weights(&read(&weights)?).with_context(|| format!("parsing {}", weights.display()))?;
            match m.validate(&w, Tolerance::relative(rel_tol)) {
                Ok(()) => {
                    println!("valid: {} x {} matrix", m.n_in() + 1, m.n_out());
                    Ok(Outcome::Pass)
                }
                Err(v) => {
                    println!("invalid: {v}");
                    Ok(Outcome::Fail)
                }
            }
        }
        Command::Replicate {
            config,
            seed,
            out,
            jobs,
        } => {
            let exp = load(&config, seed)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .context("starting worker pool")?;
            let rows = pool.install(|| experiments::replicate(&exp));
            let text = experiments::render_report(&exp, &rows)?;
            emit(&text, out.or_else(|| exp.output_path()))?;
            Ok(Outcome::Pass)
        }
        Command::CompareSchemes { config, seed, out } => {
            let exp = load(&config, seed)?;
            let cmp = experiments::compare_schemes(&exp)?;
            emit(&experiments::render_comparison(&exp, &cmp)?, out)?;
            Ok(if cmp.all_pass() { Outcome::Pass } else { Outcome::Fail })
        }
        Command::Report { report } => {
            let rows = experiments::read_report(&read(&report)?)?;
            println!(
                "{:<32} {:>6} {:>14} {:>14} {:>12} {:>8} {:>10}  status",
                "scheme", "n0", "mean", "exact", "std_error", "z", "N0var/eta2"
            );
            let mut ok = true;
            for r in &rows {
                let ratio = r.variance_ratio.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<32} {:>6} {:>14.8} {:>14.8} {:>12.3e} {:>8.3} {:>10}  {}",
                    r.scheme, r.n0, r.mean, r.exact, r.std_error, r.z, ratio, r.status
                );
                if !r.z.is_finite() || r.z.abs() > 4.0 {
                    ok = false;
                }
            }
            Ok(if ok { Outcome::Pass } else { Outcome::Fail })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
