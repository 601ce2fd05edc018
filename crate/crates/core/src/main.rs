use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use dive::error::{DiveError, Result};
use dive::eval::{run_comparison, simulate_covariates, ComparisonConfig, CorrelationMethod};
use dive::fast::audit_equivalence;
use dive::gem::{gem_fit, FitMode};
use dive::io::{self, ModelCheckpoint};
use dive::metrics::{
    baseline_dps_of, center_errors, dps_alignment, dps_error, label_agreement, match_labels, pearson,
};
use dive::mstep::FitConfig;
use dive::priors::Priors;
use dive::synthetic::{generate_dataset, ScenarioConfig};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const FIT_REPORT_FILE: &str = "fit_report.json";
const SCENARIO_FILE: &str = "scenario.toml";
const AUDIT_FILE: &str = "audit.json";
const COMPARISON_FILE: &str = "comparison.json";

#[derive(Debug, Parser)]
#[command(name = "dive", version, about = "Fit and evaluate vertex-clustered disease progression models")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "DIVE_THREADS")]
    threads: Option<usize>,

    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth and covariates.
    Simulate(SimulateArgs),
    /// Fit a model and write the checkpoint, report and plot tables.
    Fit(FitArgs),
    /// Score a checkpoint against ground truth.
    Evaluate(EvaluateArgs),
    /// Cross-validated comparison of full, ROI and no-staging models.
    Compare(CompareArgs),
    /// Check fast-path gradients against the direct objective.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding values.bin, rows.csv and adjacency.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Value matrix (binary or CSV); overrides the --data default.
    #[arg(long)]
    values: Option<PathBuf>,
    #[arg(long)]
    rows: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, file: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(file)),
            (None, None) => Err(DiveError::Config(format!("no path for {file}; pass --data or the file flag"))),
        }
    }

    fn dir(&self) -> Result<PathBuf> {
        self.data
            .clone()
            .ok_or_else(|| DiveError::Config("--data is required to locate default files".into()))
    }

    fn load(&self) -> Result<dive::dataset::Dataset> {
        io::load_dataset(
            &self.path(&self.values, io::VALUES_FILE)?,
            &self.path(&self.rows, io::ROWS_FILE)?,
            &self.path(&self.adjacency, io::ADJACENCY_FILE)?,
        )
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Named scenario: easy, medium or hard.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Scenario TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Covariate noise SD relative to the covariate's own spread.
    #[arg(long, default_value_t = 0.5)]
    covariate_noise: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Roi,
    NoStaging,
}

#[derive(Debug, Args)]
struct FitOptions {
    /// Fit settings TOML file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Use the direct per-vertex updates instead of cluster means.
    #[arg(long)]
    slow: bool,
}

impl FitOptions {
    fn resolve(&self, seed: u64) -> Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_toml(p)?,
            None => FitConfig::default(),
        };
        cfg.seed = seed;
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(m) = self.max_iters {
            cfg.max_outer_iters = m;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        if self.slow {
            cfg.fast = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    options: FitOptions,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    /// Per-vertex labels (vertex,label) for --mode roi.
    #[arg(long)]
    atlas: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with truth_labels.csv, truth_params.csv and truth_stages.csv
    /// (defaults to --data).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    options: FitOptions,
    /// Covariate table (defaults to covariates.csv under --data).
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// ROI labels (defaults to truth_labels.csv under --data).
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    spearman: bool,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DiveError::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let at = e.span().map_or("?".into(), |s| format!("byte {}", s.start));
        DiveError::format(path, at, e.message())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| DiveError::io(path, e))
}

fn simulate(args: &SimulateArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = match (&args.preset, &args.config) {
        (Some(name), _) => ScenarioConfig::preset(name)?,
        (None, Some(p)) => read_toml(p)?,
        (None, None) => ScenarioConfig::default(),
    }
    .with_seed(seed);
    let (data, truth) = generate_dataset(&cfg)?;
    let covariates = simulate_covariates(&data, &truth.row_dps(&data), args.covariate_noise, seed)?;
    io::save_dataset(out, &data)?;
    io::write_truth(out, &data, &truth)?;
    io::write_covariates(&out.join(io::COVARIATES_FILE), &data, &covariates)?;
    let scenario = toml::to_string(&cfg).map_err(|e| DiveError::Config(e.to_string()))?;
    fs::write(out.join(SCENARIO_FILE), scenario).map_err(|e| DiveError::io(out.join(SCENARIO_FILE), e))?;
    println!(
        "simulated vertices={} subjects={} rows={}",
        data.n_vertices(),
        data.n_subjects(),
        data.n_rows()
    );
    Ok(())
}

fn fit(args: &FitArgs, seed: u64, out: &Path) -> Result<()> {
    let data = args.data.load()?;
    let mut cfg = args.options.resolve(seed)?;
    let mode = match args.mode {
        ModeArg::Full => FitMode::Full,
        ModeArg::NoStaging => FitMode::NoStaging,
        ModeArg::Roi => {
            let path = args
                .atlas
                .as_ref()
                .ok_or_else(|| DiveError::Config("--mode roi needs --atlas".into()))?;
            let labels = io::read_labels(path, data.n_vertices())?;
            cfg.k = labels.iter().max().map_or(1, |m| m + 1);
            FitMode::RoiFixed(labels)
        }
    };
    let (model, report) = gem_fit(&data, &cfg, &Priors::uniform(), &mode)?;
    info!("fit finished in {:?}", report.wall_time);

    io::save_model(&out.join(CHECKPOINT_FILE), &ModelCheckpoint::new(model.clone(), &data, mode.name()))?;
    write_json(&out.join(FIT_REPORT_FILE), &report)?;
    io::write_trace(&out.join(io::TRACE_FILE), &report)?;
    io::write_substeps(&out.join(io::SUBSTEPS_FILE), &report)?;
    io::write_trajectories(&out.join(io::TRAJECTORIES_FILE), &data, &model)?;
    io::write_params(&out.join(io::PARAMS_FILE), &model.trajectories, &model.sigmas)?;
    io::write_stages(&out.join(io::STAGES_FILE), &data, &model.stages)?;
    io::write_labels(&out.join(io::LABELS_FILE), &model.hard_labels())?;
    println!(
        "fit mode={} iterations={} converged={} objective={} violations={}",
        mode.name(),
        report.iterations(),
        report.converged,
        report.final_objective(),
        report.monotonicity_violations.len()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs, out: &Path) -> Result<()> {
    let data = args.data.load()?;
    let cp = io::load_model(&args.checkpoint)?;
    cp.verify(&data)?;
    let truth_dir = match &args.truth {
        Some(d) => d.clone(),
        None => args.data.dir()?,
    };
    let truth = io::read_truth(&truth_dir, &data)?;
    let model = &cp.model;
    let k = truth.trajectories.len();
    if model.k() != k {
        return Err(DiveError::Config(format!(
            "model has {} clusters, truth has {k}",
            model.k()
        )));
    }
    let perm = match_labels(&model.posteriors, &truth.labels, k)?;
    let agreement = label_agreement(model, &truth.labels, &perm);
    let map = dps_alignment(&data, &model.stages, &truth.stages);
    let centers = center_errors(&model.trajectories, &truth.trajectories, &perm, &map);
    let de = dps_error(&data, &model.stages, &truth.stages);
    let rho = pearson(
        &baseline_dps_of(&data, &model.stages),
        &baseline_dps_of(&data, &truth.stages),
    )
    .unwrap_or(f64::NAN);

    let names: Vec<String> = (0..k).map(|c| format!("center_error_{c}")).collect();
    let mut metrics: Vec<(&str, f64)> = vec![
        ("agreement", agreement),
        ("dps_correlation", rho),
        ("dps_error", de),
        ("center_error", centers.iter().sum()),
    ];
    metrics.extend(names.iter().map(String::as_str).zip(centers.iter().copied()));
    io::write_metrics(&out.join(io::REPORT_FILE), &metrics)?;
    let line: Vec<String> = metrics.iter().map(|(n, v)| format!("{n}={v}")).collect();
    println!("{}", line.join(" "));
    Ok(())
}

fn compare(args: &CompareArgs, seed: u64, out: &Path) -> Result<()> {
    let data = args.data.load()?;
    let fit = args.options.resolve(seed)?;
    let cov_path = match &args.covariates {
        Some(p) => p.clone(),
        None => args.data.dir()?.join(io::COVARIATES_FILE),
    };
    let atlas_path = match &args.atlas {
        Some(p) => p.clone(),
        None => args.data.dir()?.join(io::TRUTH_LABELS_FILE),
    };
    let covariates = io::read_covariates(&cov_path, &data)?;
    let atlas = io::read_labels(&atlas_path, data.n_vertices())?;
    let mut config = ComparisonConfig::new(fit, atlas);
    config.folds = args.folds;
    config.seed = seed;
    if args.spearman {
        config.method = CorrelationMethod::Spearman;
    }
    let report = run_comparison(&data, &covariates, &config)?;
    io::write_comparison(out, &report)?;
    write_json(&out.join(COMPARISON_FILE), &report)?;
    for m in &report.models {
        let cells: Vec<String> = report
            .covariates
            .iter()
            .zip(&m.correlations)
            .map(|(c, s)| format!("rho_{c}={:.4}+-{:.4}", s.mean, s.sd))
            .collect();
        println!(
            "{} {} rmse={:.6}+-{:.6}",
            m.model,
            cells.join(" "),
            m.rmse.mean,
            m.rmse.sd
        );
    }
    if !report.failures.is_empty() {
        println!("failed_folds={}", report.failures.len());
    }
    Ok(())
}

fn audit(args: &AuditArgs, out: &Path) -> Result<()> {
    let data = args.data.load()?;
    let cp = io::load_model(&args.checkpoint)?;
    cp.verify(&data)?;
    let report = audit_equivalence(&data, &cp.model, args.tol);
    write_json(&out.join(AUDIT_FILE), &report)?;
    println!(
        "audit passed={} max_theta_deviation={:e} max_stage_deviation={:e}",
        report.passed, report.max_theta_deviation, report.max_stage_deviation
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DiveError::Config(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out).map_err(|e| DiveError::io(&cli.out, e))?;
    match &cli.command {
        Command::Simulate(a) => simulate(a, cli.seed, &cli.out),
        Command::Fit(a) => fit(a, cli.seed, &cli.out),
        Command::Evaluate(a) => evaluate(a, &cli.out),
        Command::Compare(a) => compare(a, cli.seed, &cli.out),
        Command::Audit(a) => audit(a, &cli.out),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
