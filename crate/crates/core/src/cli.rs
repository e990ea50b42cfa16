//! Batch commands behind the `policy-did` binary.
//!
//! Every command writes `manifest.json` under `--out`, also on failure. Exit
//! codes: 0 ok, 1 I/O, 2 validation, design or configuration, 3 numerical
//! failure or non-convergence.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{load_admissions, summarize, validate_did_assumptions, write_admissions, StudyConfig};
use crate::did::{build_design, fit_multivariate_mixed_with, InteractionScheme, MixedOptions};
use crate::effects::{did_reduction, marginal_effects, savings_count, write_did_summary_csv};
use crate::error::{Error, Result};
use crate::inference::{cluster_bootstrap_fit, coefficient_table, wilks_parallel_trend_test};
use crate::riskadjust::{risk_adjust, PanelDataset};
use crate::sim::{generate_panel, generate_synthetic, recovery_study_with, GeneratorTruth, RecoveryOptions, RecoveryPipeline};

#[derive(Debug, Parser)]
#[command(name = "policy-did", version, about = "Risk-adjusted multivariate DID for ward-level hospital panels")]
pub struct Cli {
    /// Study configuration (JSON mirroring StudyConfig).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for outcome fits and replicates. Defaults to all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Base,
    Surgical,
    Ownership,
}

impl From<SchemeArg> for InteractionScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Base => InteractionScheme::Base,
            SchemeArg::Surgical => InteractionScheme::Surgical,
            SchemeArg::Ownership => InteractionScheme::Ownership,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    Patient,
    Panel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Checks an admissions CSV against the DID design assumptions.
    Validate { input: PathBuf },
    /// Fits the risk-adjustment models and writes the ward-month panel.
    Adjust { input: PathBuf },
    /// Fits the DID model on a panel, with bootstrap inference and margins.
    Did {
        panel: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        scheme: SchemeArg,
        /// Bootstrap replicates; defaults to the configured count.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Runs a recovery study, or writes one synthetic dataset.
    Simulate {
        /// Generator truth JSON; the built-in calibration when omitted.
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
        #[arg(long, value_enum, default_value = "patient")]
        pipeline: PipelineArg,
        #[arg(long, value_enum, default_value = "base")]
        scheme: SchemeArg,
        /// Bootstrap replicates per study replicate; 0 skips interval coverage.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Write the synthetic admissions (or panel, for `--pipeline panel`) instead of running a study.
        #[arg(long)]
        emit_dataset: bool,
    },
    /// Descriptive statistics by year.
    Summarize { input: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Adjust { .. } => "adjust",
            Command::Did { .. } => "did",
            Command::Simulate { .. } => "simulate",
            Command::Summarize { .. } => "summarize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<StudyConfig>,
    pub seed: Option<u64>,
    /// SHA-256 of every input file, taken before any computation.
    pub inputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub convergence: BTreeMap<String, bool>,
    pub outputs: Vec<String>,
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_INVALID,
    }
}

/// RFC 3339 UTC time, pinned by `SOURCE_DATE_EPOCH` when set so that reruns
/// produce identical manifests.
pub fn timestamp() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|s| chrono::DateTime::from_timestamp(s, 0));
    pinned
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a command produced besides its files.
#[derive(Default)]
struct Produced {
    convergence: BTreeMap<String, bool>,
    outputs: Vec<String>,
}

struct Ctx<'a> {
    out: &'a Path,
    config: StudyConfig,
    /// `--config` was passed; it then overrides a truth file's config.
    config_given: bool,
    seed: u64,
    produced: Produced,
}

impl Ctx<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.produced.outputs.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(self.out.join(name), e))
    }
}

fn inputs_of(cli: &Cli) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = cli.config.iter().cloned().collect();
    match &cli.command {
        Command::Validate { input } | Command::Adjust { input } | Command::Summarize { input } => v.push(input.clone()),
        Command::Did { panel, .. } => v.push(panel.clone()),
        Command::Simulate { truth, .. } => v.extend(truth.iter().cloned()),
    }
    v
}

fn load_config(cli: &Cli) -> Result<StudyConfig> {
    match &cli.config {
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            StudyConfig::from_json_str(&s)
        }
        None => Ok(StudyConfig::default()),
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    if let Some(n) = cli.workers {
        // a global pool may already exist when called from tests; that is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let started_at = timestamp();
    if let Err(e) = fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return EXIT_IO;
    }
    let mut manifest = RunManifest {
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: None,
        seed: None,
        inputs: BTreeMap::new(),
        started_at,
        finished_at: String::new(),
        status: RunStatus::Failed,
        error: None,
        convergence: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let result = (|| -> Result<Produced> {
        for p in inputs_of(cli) {
            manifest.inputs.insert(p.display().to_string(), sha256_file(&p)?);
        }
        let config = load_config(cli)?;
        let seed = cli.seed.unwrap_or(config.seed);
        manifest.config = Some(config.clone());
        manifest.seed = Some(seed);
        let mut ctx = Ctx {
            out: &cli.out,
            config,
            config_given: cli.config.is_some(),
            seed,
            produced: Produced::default(),
        };
        dispatch(&cli.command, &mut ctx)?;
        Ok(ctx.produced)
    })();
    let code = match result {
        Ok(p) => {
            let converged = p.convergence.values().all(|&c| c);
            manifest.convergence = p.convergence;
            manifest.outputs = p.outputs;
            manifest.status = if converged { RunStatus::Ok } else { RunStatus::NotConverged };
            if converged {
                EXIT_OK
            } else {
                eprintln!("warning: some fits did not converge; outputs are flagged in manifest.json");
                EXIT_NUMERICAL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            manifest.error = Some(e.to_string());
            exit_code(&e)
        }
    };
    manifest.finished_at = timestamp();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = fs::write(cli.out.join("manifest.json"), text + "\n") {
        eprintln!("error: cannot write manifest: {e}");
        return EXIT_IO;
    }
    code
}

fn dispatch(command: &Command, ctx: &mut Ctx) -> Result<()> {
    match command {
        Command::Validate { input } => cmd_validate(input, ctx),
        Command::Adjust { input } => cmd_adjust(input, ctx),
        Command::Did { panel, scheme, replicates } => cmd_did(panel, (*scheme).into(), *replicates, ctx),
        Command::Simulate {
            truth,
            replicates,
            pipeline,
            scheme,
            bootstrap,
            emit_dataset,
        } => {
            let pipeline = match pipeline {
                PipelineArg::Patient => RecoveryPipeline::Patient,
                PipelineArg::Panel => RecoveryPipeline::Panel,
            };
            cmd_simulate(truth.as_deref(), *replicates, pipeline, (*scheme).into(), *bootstrap, *emit_dataset, ctx)
        }
        Command::Summarize { input } => cmd_summarize(input, ctx),
    }
}

#[derive(Serialize)]
struct ValidationOutput<'a> {
    report: &'a crate::data::DidValidationReport,
    warnings: Vec<String>,
}

fn cmd_validate(input: &Path, ctx: &mut Ctx) -> Result<()> {
    let ds = load_admissions(input, &ctx.config)?;
    let report = validate_did_assumptions(&ds)?;
    let warnings = report.warnings();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let text = serde_json::to_string_pretty(&ValidationOutput {
        report: &report,
        warnings,
    })?;
    ctx.write_text("validation.json", &text)?;
    println!("{} records, {} hospitals: design checks passed", ds.len(), ds.hospital_count());
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    alpha: f64,
    eta: Vec<f64>,
    covariates: Vec<&'static str>,
    sigma_mu_sq: f64,
    sigma_nu_sq: f64,
    loglik: f64,
    n_obs: usize,
    iterations: usize,
    converged: bool,
    unseen_records: usize,
}

fn cmd_adjust(input: &Path, ctx: &mut Ctx) -> Result<()> {
    let ds = load_admissions(input, &ctx.config)?;
    let ra = risk_adjust(&ds)?;
    let mut w = ctx.create("panel.csv")?;
    ra.panel.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("panel.csv", e))?;
    let fits: BTreeMap<&str, FitSummary> = ra
        .fits
        .iter()
        .map(|(o, f)| {
            (
                o.label(),
                FitSummary {
                    alpha: f.alpha,
                    eta: f.eta.clone(),
                    covariates: f.covariates.iter().map(|c| c.name()).collect(),
                    sigma_mu_sq: f.sigma_mu_sq,
                    sigma_nu_sq: f.sigma_nu_sq,
                    loglik: f.loglik,
                    n_obs: f.n_obs,
                    iterations: f.iterations,
                    converged: f.converged,
                    unseen_records: ra.unseen.get(o).copied().unwrap_or(0),
                },
            )
        })
        .collect();
    ctx.write_text("riskadjust.json", &serde_json::to_string_pretty(&fits)?)?;
    for (o, f) in &ra.fits {
        ctx.produced.convergence.insert(format!("glmm:{}", o.label()), f.converged);
    }
    println!("{} cells written to panel.csv", ra.panel.len());
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    scheme: InteractionScheme,
    outcomes: Vec<&'static str>,
    criterion: crate::data::Criterion,
    loglik: f64,
    sigma: &'a [Vec<f64>],
    sigma_alpha_sq: &'a [f64],
    iterations: usize,
    gradient_norm: f64,
    converged: bool,
    ridge_applied: bool,
    bootstrap_replicates: usize,
    bootstrap_failed: usize,
    bootstrap_seed: u64,
}

fn cmd_did(panel_path: &Path, scheme: InteractionScheme, replicates: Option<usize>, ctx: &mut Ctx) -> Result<()> {
    let panel = PanelDataset::load(panel_path, &ctx.config)?;
    let design = build_design(&panel, scheme)?;
    let opts = MixedOptions::from_config(&ctx.config);
    let fit = fit_multivariate_mixed_with(&design, &opts)?;
    let b = replicates.unwrap_or(ctx.config.bootstrap_replicates);
    let boot = cluster_bootstrap_fit(&design, &fit, &opts, b, ctx.seed)?;

    let table = coefficient_table(&design, &fit, Some(&boot))?;
    let mut w = ctx.create("coefficients.csv")?;
    table.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("coefficients.csv", e))?;
    let mut w = ctx.create("bootstrap.csv")?;
    boot.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("bootstrap.csv", e))?;

    if scheme == InteractionScheme::Base {
        let joint = wilks_parallel_trend_test(&panel, scheme)?;
        ctx.write_text("joint_test.json", &joint.to_json())?;
    }

    let margins = marginal_effects(&fit, &design)?;
    let mut w = ctx.create("margins.csv")?;
    margins.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("margins.csv", e))?;
    let summary = did_reduction(&margins)?;
    let savings = savings_count(&summary, &panel.treated_volume())?;
    let mut w = ctx.create("did_summary.csv")?;
    write_did_summary_csv(&summary, &savings, &mut w)?;
    w.flush().map_err(|e| Error::io("did_summary.csv", e))?;

    let model = ModelSummary {
        scheme,
        outcomes: fit.outcomes.iter().map(|o| o.label()).collect(),
        criterion: fit.criterion,
        loglik: fit.loglik,
        sigma: &fit.sigma,
        sigma_alpha_sq: &fit.sigma_alpha_sq,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        converged: fit.converged,
        ridge_applied: fit.ridge_applied,
        bootstrap_replicates: boot.replicates,
        bootstrap_failed: boot.n_failed,
        bootstrap_seed: boot.seed,
    };
    ctx.write_text("model.json", &serde_json::to_string_pretty(&model)?)?;
    ctx.produced.convergence.insert("mixed".into(), fit.converged);
    ctx.produced.convergence.insert("bootstrap".into(), boot.valid);
    println!(
        "{} scheme: {} outcomes, {} rows, {} of {} bootstrap replicates failed",
        scheme,
        fit.outcomes.len(),
        design.rows(),
        boot.n_failed,
        boot.replicates
    );
    Ok(())
}

fn cmd_simulate(
    truth_path: Option<&Path>,
    replicates: usize,
    pipeline: RecoveryPipeline,
    scheme: InteractionScheme,
    bootstrap: Option<usize>,
    emit_dataset: bool,
    ctx: &mut Ctx,
) -> Result<()> {
    let mut truth = match truth_path {
        Some(p) => GeneratorTruth::from_json_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => GeneratorTruth::default(),
    };
    if ctx.config_given {
        truth.config = ctx.config.clone();
    }
    truth.seed = ctx.seed;
    truth.validate()?;
    ctx.write_text("truth.json", &truth.to_json())?;
    if emit_dataset {
        match pipeline {
            RecoveryPipeline::Patient => {
                let ds = generate_synthetic(&truth)?;
                let mut w = ctx.create("admissions.csv")?;
                write_admissions(&mut w, ds.records())?;
                w.flush().map_err(|e| Error::io("admissions.csv", e))?;
                println!("{} admissions written", ds.len());
            }
            RecoveryPipeline::Panel => {
                let panel = generate_panel(&truth)?;
                let mut w = ctx.create("panel.csv")?;
                panel.write_csv(&mut w)?;
                w.flush().map_err(|e| Error::io("panel.csv", e))?;
                println!("{} cells written", panel.len());
            }
        }
        return Ok(());
    }
    let opts = RecoveryOptions {
        pipeline,
        scheme,
        bootstrap_replicates: match bootstrap {
            Some(0) => None,
            Some(b) => Some(b),
            None => Some(truth.config.bootstrap_replicates),
        },
        ..Default::default()
    };
    let report = recovery_study_with(&truth, replicates, &opts)?;
    let mut w = ctx.create("recovery.csv")?;
    report.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("recovery.csv", e))?;
    ctx.write_text("recovery.json", &report.to_json())?;
    println!("{} replicates, {} failed", report.replicates, report.n_failed);
    Ok(())
}

fn cmd_summarize(input: &Path, ctx: &mut Ctx) -> Result<()> {
    let ds = load_admissions(input, &ctx.config)?;
    let table = summarize(&ds);
    let mut w = ctx.create("summary.csv")?;
    table.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("summary.csv", e))?;
    println!("{} records summarized", ds.len());
    Ok(())
}
