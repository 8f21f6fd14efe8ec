//! `rtprop`: turn tutoring-system step logs into response-time propensities
//! and learning-efficiency parameters.
//!
//! Five commands cover the pipeline: `simulate` emits a synthetic
//! transaction log with known ground truth, `ingest` parses a log into the
//! canonical step table, `fit` estimates either hierarchical model globally
//! or per session slice, `analyze` runs the pooled and per-slice analyses
//! with a rendered report, and `report` re-renders that report from a stored
//! analysis. One TOML config drives everything; flags override it. Exit
//! codes: 0 success (warnings included), 1 usage or configuration error,
//! 2 data error, 3 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rtprop_core::{ErrorKind, Result};

use commands::{Model, Scope};
use config::PipelineConfig;
use output::RunDir;

#[derive(Debug, Parser)]
#[command(
    name = "rtprop",
    version,
    about = "Response-time propensity and learning-efficiency pipeline"
)]
struct Cli {
    /// TOML pipeline config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Exact output directory (default: <out_dir>/<timestamp>-<config hash>).
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Parent directory for timestamped run directories.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Master seed; overrides the config and feeds all randomness.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a transaction log into the canonical step table.
    Ingest {
        /// Raw transaction CSV/TSV (overrides `input` in the config).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Minutes of inactivity that close a session.
        #[arg(long, value_name = "MIN")]
        session_gap_minutes: Option<f64>,
        /// Number of within-student session slices.
        #[arg(long, value_name = "K")]
        slice_count: Option<u8>,
        /// Multi-skill rows: `replicate` per skill or keep `first`.
        #[arg(long, value_name = "MODE")]
        multi_kc: Option<String>,
        /// Upper-tail winsorization quantile for response times, e.g. 0.995.
        #[arg(long, value_name = "Q")]
        winsorize_quantile: Option<f64>,
    },
    /// Generate a synthetic population with known ground truth.
    Simulate {
        /// Number of students.
        #[arg(long, value_name = "N")]
        n_students: Option<usize>,
        /// Number of skills.
        #[arg(long, value_name = "N")]
        n_skills: Option<usize>,
    },
    /// Fit the response-time or correctness model.
    Fit {
        /// Which model to estimate.
        #[arg(long, value_enum)]
        model: Model,
        /// Fit once on all rows or separately per session slice.
        #[arg(long, value_enum, default_value = "global")]
        scope: Scope,
        /// Canonical step table (overrides `steps` in the config).
        #[arg(long, value_name = "FILE")]
        steps: Option<PathBuf>,
        /// Response-time model objective: `reml` or `ml`.
        #[arg(long, value_name = "CRIT")]
        criterion: Option<String>,
    },
    /// Run the pooled and per-slice analyses and render the report.
    Analyze {
        /// Canonical step table (overrides `steps` in the config).
        #[arg(long, value_name = "FILE")]
        steps: Option<PathBuf>,
        /// Minimum step rows per student within a slice.
        #[arg(long, value_name = "N")]
        min_obs_per_slice: Option<u32>,
    },
    /// Re-render the markdown report from a stored analysis.
    Report {
        /// `analysis.json` produced by `analyze`.
        #[arg(long, value_name = "FILE")]
        analysis: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as ClapKind;
            let code = match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    apply_command_overrides(&mut cfg, &cli.command)?;
    cfg.resolve();

    // `report` reuses the stored artifact's hash so the re-render is
    // byte-identical; every other command stamps the resolved config.
    if let Command::Report { analysis } = &cli.command {
        let artifact = commands::load_analysis(analysis)?;
        let run = RunDir::create(&cfg.out_dir, cli.run_dir.as_deref(), &artifact.config_hash)?;
        return in_run_dir(run, |run| commands::cmd_report(&artifact, run));
    }

    let hash = cfg.hash()?;
    let run = RunDir::create(&cfg.out_dir, cli.run_dir.as_deref(), &hash)?;
    in_run_dir(run, |run| {
        run.write_json(
            "config.json",
            &serde_json::json!({
                "config_hash": hash,
                "version": output::VERSION,
                "config": &cfg,
            }),
        )?;
        match &cli.command {
            Command::Ingest { input, .. } => {
                commands::cmd_ingest(&cfg, &hash, run, input.as_deref())
            }
            Command::Simulate { .. } => commands::cmd_simulate(&cfg, &hash, run),
            Command::Fit { model, scope, steps, .. } => {
                commands::cmd_fit(&cfg, &hash, run, *model, *scope, steps.as_deref())
            }
            Command::Analyze { steps, .. } => {
                commands::cmd_analyze(&cfg, &hash, run, steps.as_deref())
            }
            Command::Report { .. } => unreachable!("handled above"),
        }
    })
}

/// Folds per-command flags into the config before it is hashed, so overrides
/// and file settings are indistinguishable downstream.
fn apply_command_overrides(cfg: &mut PipelineConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Ingest {
            session_gap_minutes,
            slice_count,
            multi_kc,
            winsorize_quantile,
            ..
        } => {
            if let Some(v) = session_gap_minutes {
                cfg.ingest.session_gap_minutes = *v;
            }
            if let Some(v) = slice_count {
                cfg.ingest.slice_count = *v;
            }
            if let Some(mode) = multi_kc {
                cfg.ingest.multi_kc = match mode.as_str() {
                    "replicate" => rtprop_core::ingest::MultiKcMode::Replicate,
                    "first" => rtprop_core::ingest::MultiKcMode::First,
                    other => {
                        return Err(rtprop_core::Error::config(format!(
                            "unknown multi-kc mode {other:?} (expected replicate or first)"
                        )))
                    }
                };
            }
            if let Some(v) = winsorize_quantile {
                cfg.ingest.winsorize_quantile = Some(*v);
            }
        }
        Command::Simulate { n_students, n_skills } => {
            if let Some(v) = n_students {
                cfg.simulate.n_students = *v;
            }
            if let Some(v) = n_skills {
                cfg.simulate.n_skills = *v;
            }
        }
        Command::Fit { criterion, .. } => {
            if let Some(c) = criterion {
                cfg.analysis.lmm.criterion = c.parse()?;
            }
        }
        Command::Analyze { min_obs_per_slice, .. } => {
            if let Some(v) = min_obs_per_slice {
                cfg.analysis.min_obs_per_slice = *v;
            }
        }
        Command::Report { .. } => {}
    }
    Ok(())
}

/// Runs one command inside its run directory; on failure every file the
/// command wrote is removed before the error propagates.
fn in_run_dir(mut run: RunDir, f: impl FnOnce(&mut RunDir) -> Result<()>) -> Result<()> {
    match f(&mut run) {
        Ok(()) => {
            println!("outputs in {}", run.dir().display());
            Ok(())
        }
        Err(e) => {
            run.discard();
            Err(e)
        }
    }
}
