//! `vicurl`: runs, ablations, oracle checks and variance sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use vicurl_core::diagnostics::{fit_decay_exponent, variance_sweep, DecayFit, DiagnosticRecord, GradientSampler};
use vicurl_core::harness::run::{prepare, run_experiment_with_policy};
use vicurl_core::harness::{run_ablation, AblationConfig, ExperimentConfig};
use vicurl_core::oracle::matrix::{run_matrix_with, MatrixConfig};

#[derive(Parser)]
#[command(name = "vicurl", version, about = "Tabular GRPO with a confidence-guided curriculum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its JSONL record.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run.jsonl")]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a reward mode × method matrix over seeds and write a CSV summary.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
    },
    /// Exact checks on enumerable instances; prints a JSON report and exits
    /// non-zero if any check fails.
    OracleCheck {
        /// Instance grid; the built-in grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave the per-instance cases out of the printed report.
        #[arg(long)]
        summary_only: bool,
    },
    /// Variance sweep over a retention grid at the policy reached after the
    /// config's `total_steps` (the reference policy when that is 0).
    Diag {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        betas: Vec<f64>,
        /// Group draws per prompt; defaults to the config's diagnostics.repeats.
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, default_value = "diag.jsonl")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct DiagHeader<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    repeats: usize,
}

#[derive(Serialize)]
struct DiagFit {
    decay_fit: Option<DecayFit>,
    fit_error: Option<String>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let (record, _) = run_experiment_with_policy(&cfg)?;
    record
        .write_jsonl(out)
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(row) = record.final_eval() {
        eprintln!(
            "step {}: pass@1 {:.4}, pass@8 {:.4}",
            row.step,
            row.pass_at_1.unwrap_or(f64::NAN),
            row.pass_at_8.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn ablate(config: &Path, out: &Path) -> Result<()> {
    let cfg = AblationConfig::from_path(config).with_context(|| format!("loading {}", config.display()))?;
    let summary = run_ablation(&cfg.cells(), &cfg.seeds)?;
    let csv = summary.to_csv();
    write_file(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn oracle_check(config: Option<&Path>, out: Option<&Path>, summary_only: bool) -> Result<bool> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            MatrixConfig::from_toml_str(&text)?
        }
        None => MatrixConfig::default(),
    };
    let mut report = run_matrix_with(&cfg)?;
    let passed = report.passed();
    if let Some(p) = out {
        write_file(p, &serde_json::to_string_pretty(&report)?)?;
    }
    if summary_only {
        report.cases.clear();
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ "passed": passed, "report": report }))?
    );
    Ok(passed)
}

fn diag(config: &Path, betas: &[f64], repeats: Option<usize>, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config).with_context(|| format!("loading {}", config.display()))?;
    let repeats = repeats.unwrap_or(cfg.diagnostics.repeats);
    if repeats < 2 {
        bail!("--repeats must be at least 2");
    }
    let setup = prepare(&cfg)?;
    let (_, theta) = run_experiment_with_policy(&cfg)?;
    let sampler = GradientSampler {
        theta: &theta,
        theta_old: &theta,
        reference: &setup.reference,
        cfg: &cfg.surrogate,
        reward_mode: cfg.reward_mode,
        group_size: cfg.group_size,
    };
    let points = variance_sweep(&sampler, &setup.dataset.prompts, betas, repeats, cfg.seed)?;

    let mut text = serde_json::to_string(&DiagHeader {
        config_hash: cfg.hash(),
        config: &cfg,
        repeats,
    })?;
    text.push('\n');
    for p in &points {
        let record: DiagnosticRecord = p.report.to_record(cfg.total_steps, p.beta_target, p.tau);
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
    }
    let series: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|p| (p.report.beta, p.report.sigma_g2, p.report.v_prob))
        .collect();
    let fit = match fit_decay_exponent(&series) {
        Ok(f) => DiagFit {
            decay_fit: Some(f),
            fit_error: None,
        },
        Err(e) => DiagFit {
            decay_fit: None,
            fit_error: Some(e.to_string()),
        },
    };
    text.push_str(&serde_json::to_string(&fit)?);
    text.push('\n');
    write_file(out, &text)?;

    let mut stderr = std::io::stderr().lock();
    for p in &points {
        writeln!(
            stderr,
            "beta {:.3} (kept {:.3}): ratio_sigma {:.4}, ratio_vprob {:.4}",
            p.beta_target, p.report.beta, p.report.ratio_sigma, p.report.ratio_vprob
        )?;
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, out, seed } => run(&config, &out, seed)?,
        Command::Ablate { config, out } => ablate(&config, &out)?,
        Command::OracleCheck {
            config,
            out,
            summary_only,
        } => {
            if !oracle_check(config.as_deref(), out.as_deref(), summary_only)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Diag {
            config,
            betas,
            repeats,
            out,
        } => diag(&config, &betas, repeats, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}
