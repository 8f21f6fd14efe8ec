//! Command implementations: each wires core operations to artifact files in
//! a run directory.
//!
//! Artifact shapes are uniform: JSON files carry `config_hash` and `version`
//! fields, CSV files open with a `#`-comment stamp, and the markdown report
//! closes with the same stamp. `fit` applies no per-student row filters; the
//! analysis thresholds belong to `analyze`.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rtprop_core::analysis::{
    effects_to_csv, params_to_csv, render_markdown_report, run_full_analysis, stability_to_csv,
    AnalysisOutput,
};
use rtprop_core::iafm::{extract_student_params, fit_iafm, IafmData, IafmFit};
use rtprop_core::ingest::{ingest, read_step_table, write_step_table, QualityReport};
use rtprop_core::lmm::{fit_lmm, LmmData, LmmFit, RtDesignMeta};
use rtprop_core::simulate::{emit_transactions, generate_population, GroundTruth};
use rtprop_core::types::StepRecord;
use rtprop_core::{Error, Result};

use crate::config::PipelineConfig;
use crate::output::{csv_stamp, RunDir, VERSION};

/// Which model `fit` estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Model {
    /// Gaussian mixed model on log response time.
    Rt,
    /// Logistic mixed model on first-attempt correctness.
    Iafm,
}

/// Whether `fit` runs once or fans out per session slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scope {
    Global,
    BySlice,
}

/// Quality report artifact written by `ingest`.
#[derive(Debug, Serialize, Deserialize)]
pub struct QualityArtifact {
    pub config_hash: String,
    pub version: String,
    pub quality: QualityReport,
}

/// Ground-truth artifact written by `simulate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthArtifact {
    pub config_hash: String,
    pub version: String,
    pub truth: GroundTruth,
}

/// Response-time fit artifact; `fit` is absent when the slice had nothing
/// to estimate, with `note` saying why.
#[derive(Debug, Serialize, Deserialize)]
pub struct RtFitArtifact {
    pub config_hash: String,
    pub version: String,
    pub model: String,
    pub scope: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<RtDesignMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<LmmFit>,
}

/// Correctness fit artifact, same shape as [`RtFitArtifact`].
#[derive(Debug, Serialize, Deserialize)]
pub struct IafmFitArtifact {
    pub config_hash: String,
    pub version: String,
    pub model: String,
    pub scope: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<IafmFit>,
}

/// Full analysis artifact written by `analyze` and re-rendered by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisArtifact {
    pub config_hash: String,
    pub version: String,
    pub analysis: AnalysisOutput,
}

/// Parses a transaction log into `steps.csv` plus `quality.json`. Rejected
/// rows are counted, not fatal; only unreadable input fails the command.
pub fn cmd_ingest(
    cfg: &PipelineConfig,
    hash: &str,
    run: &mut RunDir,
    input: Option<&Path>,
) -> Result<()> {
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.input.clone())
        .ok_or_else(|| {
            Error::config("ingest needs an input file: set `input` in the config or pass --input")
        })?;
    let file = File::open(&input)
        .map_err(|e| Error::config(format!("cannot open input {}: {e}", input.display())))?;
    let out = ingest(file, &cfg.ingest)?;

    let mut steps_csv = Vec::new();
    write_step_table(&mut steps_csv, &out.steps, &[csv_stamp(hash)])?;
    run.write_bytes("steps.csv", &steps_csv)?;
    run.write_json(
        "quality.json",
        &QualityArtifact {
            config_hash: hash.to_string(),
            version: VERSION.to_string(),
            quality: out.report.clone(),
        },
    )?;

    let rejected = out.report.input_rows - out.report.parsed_rows;
    println!(
        "ingested {}: {} rows in, {} rejected, {} steps across {} sessions",
        input.display(),
        out.report.input_rows,
        rejected + out.report.attempts_in_rejected_groups,
        out.report.steps_emitted,
        out.report.sessions,
    );
    Ok(())
}

/// Generates a synthetic population: `transactions.csv` plus `truth.json`.
pub fn cmd_simulate(cfg: &PipelineConfig, hash: &str, run: &mut RunDir) -> Result<()> {
    let sim = generate_population(&cfg.simulate)?;

    let mut tx = Vec::new();
    emit_transactions(&mut tx, &sim.attempts, &[csv_stamp(hash)])?;
    run.write_bytes("transactions.csv", &tx)?;
    run.write_json(
        "truth.json",
        &TruthArtifact {
            config_hash: hash.to_string(),
            version: VERSION.to_string(),
            truth: sim.truth,
        },
    )?;

    println!(
        "simulated {} students x {} skills: {} attempts over {} steps (seed {})",
        cfg.simulate.n_students,
        cfg.simulate.n_skills,
        sim.attempts.len(),
        sim.steps.len(),
        cfg.simulate.seed,
    );
    Ok(())
}

/// Fits one model globally or per slice. Unconverged fits are recorded, not
/// fatal. Per slice, a failed fit becomes a `note` in that slice's artifact;
/// the command fails only when no slice could be fit at all.
pub fn cmd_fit(
    cfg: &PipelineConfig,
    hash: &str,
    run: &mut RunDir,
    model: Model,
    scope: Scope,
    steps: Option<&Path>,
) -> Result<()> {
    let rows = load_steps(cfg, steps)?;
    match scope {
        Scope::Global => match model {
            Model::Rt => {
                let (fit, design) = fit_rt_once(&rows, cfg)?;
                write_rt_artifact(run, hash, "global", None, Some((fit, design)), None)?;
            }
            Model::Iafm => {
                let fit = fit_iafm_once(&rows, cfg)?;
                write_iafm_artifact(run, hash, "global", None, Some(fit), None)?;
            }
        },
        Scope::BySlice => {
            let k = cfg.analysis.slice_count.max(1);
            let by_slice: Vec<Vec<StepRecord>> = (1..=k)
                .map(|q| rows.iter().filter(|s| s.slice.0 == q).cloned().collect())
                .collect();
            match model {
                Model::Rt => {
                    let fits: Vec<_> = by_slice
                        .par_iter()
                        .map(|rows| fit_rt_once(rows, cfg))
                        .collect();
                    let mut first_err = None;
                    let mut any_ok = false;
                    for (i, res) in fits.into_iter().enumerate() {
                        let q = i as u8 + 1;
                        match res {
                            Ok(fit) => {
                                any_ok = true;
                                write_rt_artifact(run, hash, "by-slice", Some(q), Some(fit), None)?;
                            }
                            Err(e) => {
                                write_rt_artifact(
                                    run,
                                    hash,
                                    "by-slice",
                                    Some(q),
                                    None,
                                    Some(e.to_string()),
                                )?;
                                first_err.get_or_insert(e);
                            }
                        }
                    }
                    if !any_ok {
                        return Err(first_err.expect("k >= 1 slices were attempted"));
                    }
                }
                Model::Iafm => {
                    let fits: Vec<_> = by_slice
                        .par_iter()
                        .map(|rows| fit_iafm_once(rows, cfg))
                        .collect();
                    let mut first_err = None;
                    let mut any_ok = false;
                    for (i, res) in fits.into_iter().enumerate() {
                        let q = i as u8 + 1;
                        match res {
                            Ok(fit) => {
                                any_ok = true;
                                write_iafm_artifact(
                                    run,
                                    hash,
                                    "by-slice",
                                    Some(q),
                                    Some(fit),
                                    None,
                                )?;
                            }
                            Err(e) => {
                                write_iafm_artifact(
                                    run,
                                    hash,
                                    "by-slice",
                                    Some(q),
                                    None,
                                    Some(e.to_string()),
                                )?;
                                first_err.get_or_insert(e);
                            }
                        }
                    }
                    if !any_ok {
                        return Err(first_err.expect("k >= 1 slices were attempted"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Runs the pooled and per-slice analyses, writing `analysis.json`,
/// `report.md`, and the three CSV tables.
pub fn cmd_analyze(
    cfg: &PipelineConfig,
    hash: &str,
    run: &mut RunDir,
    steps: Option<&Path>,
) -> Result<()> {
    let rows = load_steps(cfg, steps)?;
    let analysis = run_full_analysis(&rows, &cfg.analysis)?;

    let artifact = AnalysisArtifact {
        config_hash: hash.to_string(),
        version: VERSION.to_string(),
        analysis,
    };
    run.write_json("analysis.json", &artifact)?;
    let a = &artifact.analysis;

    run.write_bytes("report.md", render_markdown_report(a, hash).as_bytes())?;
    run.write_bytes(
        "stability.csv",
        stamped_csv(hash, &stability_to_csv(&[&a.stability_rt, &a.stability_learning])?).as_bytes(),
    )?;
    run.write_bytes("params.csv", stamped_csv(hash, &params_to_csv(&a.pooled_params)?).as_bytes())?;
    run.write_bytes("effects.csv", stamped_csv(hash, &effects_to_csv(&a.effects)?).as_bytes())?;

    let available = a.slices.iter().filter(|s| s.available).count();
    println!(
        "analyzed {} steps from {} students: {}/{} slices available, pooled models {}",
        a.n_steps,
        a.n_students,
        available,
        a.slices.len(),
        if a.pooled_lmm.converged && a.pooled_iafm.converged {
            "converged"
        } else {
            "recorded with converged=false"
        },
    );
    Ok(())
}

/// Re-renders `report.md` from a stored analysis artifact, byte-identical to
/// the original render; nothing is recomputed.
pub fn cmd_report(artifact: &AnalysisArtifact, run: &mut RunDir) -> Result<()> {
    let report = render_markdown_report(&artifact.analysis, &artifact.config_hash);
    run.write_bytes("report.md", report.as_bytes())?;
    println!("re-rendered report for config {}", artifact.config_hash);
    Ok(())
}

/// Loads the analysis artifact `report` re-renders from.
pub fn load_analysis(path: &Path) -> Result<AnalysisArtifact> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read analysis {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_steps(cfg: &PipelineConfig, flag: Option<&Path>) -> Result<Vec<StepRecord>> {
    let path: PathBuf = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.steps.clone())
        .ok_or_else(|| {
            Error::config("this command needs a step table: set `steps` in the config or pass --steps")
        })?;
    let file = File::open(&path)
        .map_err(|e| Error::config(format!("cannot open step table {}: {e}", path.display())))?;
    let rows = read_step_table(file)?;
    if rows.is_empty() {
        return Err(Error::data(format!("empty step table {}", path.display())));
    }
    Ok(rows)
}

fn fit_rt_once(rows: &[StepRecord], cfg: &PipelineConfig) -> Result<(LmmFit, RtDesignMeta)> {
    let (data, meta) = LmmData::rt_from_steps(rows);
    if data.y.is_empty() {
        return Err(Error::data("no response-time observations"));
    }
    Ok((fit_lmm(&data, &cfg.analysis.lmm)?, meta))
}

fn fit_iafm_once(rows: &[StepRecord], cfg: &PipelineConfig) -> Result<IafmFit> {
    if rows.is_empty() {
        return Err(Error::data("no rows"));
    }
    let data = IafmData::from_steps(rows);
    fit_iafm(&data, &cfg.analysis.iafm)
}

fn write_rt_artifact(
    run: &mut RunDir,
    hash: &str,
    scope: &str,
    slice: Option<u8>,
    fit: Option<(LmmFit, RtDesignMeta)>,
    note: Option<String>,
) -> Result<()> {
    let suffix = slice.map(|q| format!("_q{q}")).unwrap_or_default();
    let (fit, design) = match fit {
        Some((f, d)) => (Some(f), Some(d)),
        None => (None, None),
    };
    if let Some(f) = &fit {
        let mut buf = Vec::new();
        writeln!(buf, "# {}", csv_stamp(hash))?;
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["student_id", "rt_propensity", "n_obs"])?;
            for row in f.extract_blups("student")? {
                w.write_record([row.id.as_str(), &row.effect.to_string(), &row.n_obs.to_string()])?;
            }
            w.flush()?;
        }
        run.write_bytes(&format!("params_rt{suffix}.csv"), &buf)?;
        println!(
            "rt{}: {} obs, intercept {:.4}, converged={}",
            slice.map(|q| format!(" Q{q}")).unwrap_or_default(),
            f.n_obs,
            f.intercept,
            f.converged,
        );
    } else if let Some(n) = &note {
        println!("rt{}: skipped ({n})", slice.map(|q| format!(" Q{q}")).unwrap_or_default());
    }
    run.write_json(
        &format!("fit_rt{suffix}.json"),
        &RtFitArtifact {
            config_hash: hash.to_string(),
            version: VERSION.to_string(),
            model: "rt".to_string(),
            scope: scope.to_string(),
            slice: slice.map(|q| format!("Q{q}")),
            note,
            design,
            fit,
        },
    )
}

fn write_iafm_artifact(
    run: &mut RunDir,
    hash: &str,
    scope: &str,
    slice: Option<u8>,
    fit: Option<IafmFit>,
    note: Option<String>,
) -> Result<()> {
    let suffix = slice.map(|q| format!("_q{q}")).unwrap_or_default();
    if let Some(f) = &fit {
        let mut buf = Vec::new();
        writeln!(buf, "# {}", csv_stamp(hash))?;
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["student_id", "prior_proficiency", "learning_rate", "n_obs"])?;
            for row in extract_student_params(f)? {
                w.write_record([
                    row.student_id.as_str(),
                    &row.prior_proficiency.to_string(),
                    &row.learning_rate.to_string(),
                    &row.n_obs.to_string(),
                ])?;
            }
            w.flush()?;
        }
        run.write_bytes(&format!("params_iafm{suffix}.csv"), &buf)?;
        println!(
            "iafm{}: {} obs, beta {:?}, converged={}",
            slice.map(|q| format!(" Q{q}")).unwrap_or_default(),
            f.n_obs,
            f.beta,
            f.converged,
        );
    } else if let Some(n) = &note {
        println!("iafm{}: skipped ({n})", slice.map(|q| format!(" Q{q}")).unwrap_or_default());
    }
    run.write_json(
        &format!("fit_iafm{suffix}.json"),
        &IafmFitArtifact {
            config_hash: hash.to_string(),
            version: VERSION.to_string(),
            model: "iafm".to_string(),
            scope: scope.to_string(),
            slice: slice.map(|q| format!("Q{q}")),
            note,
            fit,
        },
    )
}

fn stamped_csv(hash: &str, body: &str) -> String {
    format!("# {}\n{body}", csv_stamp(hash))
}
