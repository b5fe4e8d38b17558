//! Command-line front end: `drrf fit|predict|simulate|benchmark|coverage`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datasets::{load_csv, save_csv, sniff_csv_dims};
use crate::error::{DrrfError, Result};
use crate::estimator::{fit, load_model, save_model, DrrfConfig, Variant};
use crate::forest::ForestParams;
use crate::moments::{MomentKind, MomentSpec, Policy};
use crate::simharness::{
    eval_grid, generate, midpoint_grid, run_coverage_experiment, run_rmse_experiment, theta0,
    write_summary_csv, DgpConfig, DgpFamily, Estimator,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_DOMAIN: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "drrf", version, about = "Doubly robust random forests for conditional moment functionals")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model on a dataset CSV and write the model file.
    Fit(FitArgs),
    /// Evaluate a model at the query points of a CSV.
    Predict(PredictArgs),
    /// Write a simulated dataset and its true effect curve.
    Simulate(SimulateArgs),
    /// Grid RMSE over replications.
    Benchmark(BenchmarkArgs),
    /// Interval coverage over replications.
    Coverage(CoverageArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MomentArg {
    Cate,
    Came,
    Cipe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Debiased,
    PlugIn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Drrf,
    DrrfCv,
    Oracle,
    PlugIn,
    Zero,
}

#[derive(Args, Debug, Clone)]
pub struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 0.88)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.3)]
    pub rho: f64,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    #[arg(long, default_value_t = 1.0)]
    pub pi: f64,
    /// Trees per little bag of the target forest.
    #[arg(long, default_value_t = 10)]
    pub bag_size: usize,
    /// One L1 penalty for every lasso; defaults to the subsample-based formula.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub ridge_alpha: f64,
    /// Cross-validate the regression penalty at every point.
    #[arg(long)]
    pub cv: bool,
    #[arg(long, value_enum, default_value_t = VariantArg::Debiased)]
    pub variant: VariantArg,
}

impl ForestArgs {
    pub fn config(&self) -> DrrfConfig {
        DrrfConfig {
            forest: ForestParams {
                trees: self.trees,
                beta: self.beta,
                rho: self.rho,
                min_leaf: self.min_leaf,
                pi: self.pi,
                bag_size: self.bag_size,
                lambda_node: self.lambda,
                ridge_alpha: self.ridge_alpha,
                ..ForestParams::default()
            },
            nuisance_min_s1_child: None,
            lambda_g: self.lambda,
            lambda_alpha: self.lambda,
            cv: self.cv,
            variant: match self.variant {
                VariantArg::Debiased => Variant::Debiased,
                VariantArg::PlugIn => Variant::PlugIn,
            },
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to DRRF_WORKERS, then to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write timing columns to a separate `.timings.csv` file.
    #[arg(long)]
    pub deterministic_output: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DgpArgs {
    #[arg(long, default_value = "binary1")]
    pub family: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub p: usize,
    /// Total sample size 2n.
    #[arg(long, default_value_t = 5000)]
    pub n2: usize,
    /// Append a constant column to w.
    #[arg(long)]
    pub intercept: bool,
}

impl DgpArgs {
    pub fn config(&self, seed: u64) -> Result<DgpConfig> {
        let family: DgpFamily = self.family.parse()?;
        let cfg = DgpConfig {
            p: self.p,
            two_n: self.n2,
            intercept: self.intercept,
            ..DgpConfig::new(family, self.k, seed)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Dataset CSV with header y,x1..xd,w1..wp.
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MomentArg::Cate)]
    pub moment: MomentArg,
    /// Treatment column, counted from 0 among the w columns.
    #[arg(long, default_value_t = 0)]
    pub treatment_col: usize,
    /// Constant policy value for the incremental policy moment.
    #[arg(long, default_value_t = 1.0)]
    pub policy_value: f64,
    /// Keep only the debiased moments in the model file.
    #[arg(long)]
    pub slim: bool,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Query CSV with header x1..xd.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add lower and upper interval columns at this confidence level.
    #[arg(long)]
    pub level: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// Dataset CSV to write; the true curve goes to `<stem>.truth.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkArgs {
    /// Per-replication CSV; the summary goes to `<stem>.summary.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "drrf")]
    pub estimators: Vec<EstimatorArg>,
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct CoverageArgs {
    /// Coverage CSV with header x,coverage,mean_width.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.9)]
    pub level: f64,
    /// Number of evaluation points (cell midpoints of [0, 1]).
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Drrf)]
    pub estimator: EstimatorArg,
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Exit status for a library error.
pub fn exit_code(err: &DrrfError) -> i32 {
    match err {
        DrrfError::Config(_) => EXIT_USAGE,
        DrrfError::Parse { .. }
        | DrrfError::Schema(_)
        | DrrfError::Incompatible { .. }
        | DrrfError::Integrity(_) => EXIT_SCHEMA,
        DrrfError::Domain(_) => EXIT_DOMAIN,
        DrrfError::NuisanceFit { source, .. } => exit_code(source).max(EXIT_INTERNAL),
        _ => EXIT_INTERNAL,
    }
}

struct Failure {
    stage: &'static str,
    error: DrrfError,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DrrfError + '_ {
    move |e| DrrfError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// `data.csv` → `data.<suffix>.csv`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

/// Parses a `key=value` file into `--key value` arguments. Blank lines and
/// lines starting with `#` are skipped; `key=true`/`key=false` toggle flags.
pub fn config_file_args(text: &str) -> Result<Vec<OsString>> {
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DrrfError::Config(format!("config line {}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            return Err(DrrfError::Config(format!("config line {}: invalid key", n + 1)));
        }
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{key}").into());
                args.push(value.into());
            }
        }
    }
    Ok(args)
}

/// Inserts config-file arguments right after the subcommand so that explicit
/// flags, which come later, override them.
fn merge_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, (i32, String)> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path)
        .map_err(|e| (EXIT_USAGE, format!("cannot read config {}: {e}", path.display())))?;
    let extra = config_file_args(&text).map_err(|e| (EXIT_USAGE, e.to_string()))?;
    let sub = args
        .iter()
        .position(|a| ["fit", "predict", "simulate", "benchmark", "coverage"].contains(&&*a.to_string_lossy()));
    let Some(sub) = sub else { return Ok(args) };
    let mut merged = args[..=sub].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[sub + 1..]);
    Ok(merged)
}

fn workers(run: &RunArgs) -> std::result::Result<Option<usize>, Failure> {
    if let Some(w) = run.workers {
        return Ok(Some(w));
    }
    match std::env::var("DRRF_WORKERS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure {
            stage: "configuration",
            error: DrrfError::Config(format!("DRRF_WORKERS={v} is not a count")),
        }),
        Err(_) => Ok(None),
    }
}

fn print_resolved(cli: &Cli) {
    eprintln!("# resolved configuration");
    eprintln!("# {:?}", cli.command);
}

/// Runs the CLI on `args` (including the program name) and returns the exit status.
pub fn run(args: Vec<OsString>) -> i32 {
    let args = match merge_config(args) {
        Ok(a) => a,
        Err((code, msg)) => {
            eprintln!("drrf: {msg}");
            return code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    print_resolved(&cli);
    let run_args = match &cli.command {
        Command::Fit(a) => &a.run,
        Command::Predict(a) => &a.run,
        Command::Simulate(a) => &a.run,
        Command::Benchmark(a) => &a.run,
        Command::Coverage(a) => &a.run,
    };
    let result = workers(run_args).and_then(|w| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = w {
            builder = builder.num_threads(w.max(1));
        }
        let pool = builder.build().map_err(|e| Failure {
            stage: "configuration",
            error: DrrfError::Config(e.to_string()),
        })?;
        pool.install(|| dispatch(&cli.command))
    });
    match result {
        Ok(code) => code,
        Err(Failure { stage, error }) => {
            eprintln!("drrf: {stage} failed: {error}");
            exit_code(&error)
        }
    }
}

fn dispatch(command: &Command) -> std::result::Result<i32, Failure> {
    match command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Coverage(a) => cmd_coverage(a),
    }
}

fn moment_spec(a: &FitArgs) -> Result<MomentSpec<f64>> {
    let kind = match a.moment {
        MomentArg::Cate => MomentKind::Cate,
        MomentArg::Came => MomentKind::Came,
        MomentArg::Cipe => MomentKind::Cipe,
    };
    let policy: Option<Policy<f64>> = (kind == MomentKind::Cipe).then(|| {
        let v = a.policy_value;
        Arc::new(move |_: &[f64], _: &[f64]| v) as Policy<f64>
    });
    MomentSpec::from_kind(kind, a.treatment_col, policy)
}

fn cmd_fit(a: &FitArgs) -> std::result::Result<i32, Failure> {
    let spec = moment_spec(a).stage("configuration")?;
    let (d, p) = sniff_csv_dims(&a.data).stage("reading data")?;
    let data = load_csv(&a.data, d, p, a.treatment_col).stage("reading data")?;
    let config = a.forest.config();
    let start = Instant::now();
    let mut model = fit(&data, &spec, &config, a.run.seed).stage("fitting")?;
    let seconds = start.elapsed().as_secs_f64();
    if a.slim {
        model = model.slim();
    }
    save_model(&model, &a.out).stage("writing model")?;
    let m = &model.metadata;
    println!(
        "n={} p={} B={} s={} lambda={} fit_seconds={:.3}",
        data.len(),
        p,
        model.params.trees,
        m.target_subsample,
        m.lambda_g.unwrap_or(f64::NAN),
        seconds
    );
    Ok(EXIT_OK)
}

/// Query CSV with header `x1..xd`; values are not range-checked here.
pub fn read_queries(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DrrfError::Schema("empty query file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected: Vec<String> = (1..=cols.len()).map(|j| format!("x{j}")).collect();
    if cols != expected {
        return Err(DrrfError::Schema(format!("query header `{header}` is not x1..xd")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DrrfError::Parse {
                    row: i + 1,
                    message: e.to_string(),
                })?;
            if row.len() != cols.len() {
                return Err(DrrfError::Parse {
                    row: i + 1,
                    message: format!("expected {} values, found {}", cols.len(), row.len()),
                });
            }
            Ok(row)
        })
        .collect()
}

fn cmd_predict(a: &PredictArgs) -> std::result::Result<i32, Failure> {
    let model = load_model(&a.model).stage("loading model")?;
    let queries = read_queries(&a.data).stage("reading queries")?;
    if let Some(q) = queries.first() {
        if q.len() != model.d() {
            return Err(Failure {
                stage: "reading queries",
                error: DrrfError::Schema(format!("queries have {} columns, model expects {}", q.len(), model.d())),
            });
        }
    }
    if let Some(level) = a.level {
        if !(level > 0.0 && level < 1.0) {
            return Err(Failure {
                stage: "configuration",
                error: DrrfError::Config(format!("level {level} outside (0, 1)")),
            });
        }
    }
    let preds = model.predict_batch(&queries);
    let mut out = String::new();
    let header: Vec<String> = (1..=model.d()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push_str(if a.level.is_some() { ",theta_hat,lower,upper\n" } else { ",theta_hat\n" });
    let mut worst = EXIT_OK;
    for (i, (x, pred)) in queries.iter().zip(preds).enumerate() {
        let xs: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&xs.join(","));
        let row = pred.and_then(|theta| match a.level {
            Some(level) => model
                .confidence_interval(x, level)
                .map(|ci| format!(",{theta:?},{:?},{:?}", ci.lower, ci.upper)),
            None => Ok(format!(",{theta:?}")),
        });
        match row {
            Ok(cells) => out.push_str(&cells),
            Err(e) => {
                eprintln!("drrf: query row {}: {e}", i + 1);
                out.push_str(if a.level.is_some() { ",NaN,NaN,NaN" } else { ",NaN" });
                worst = worst.max(exit_code(&e));
            }
        }
        out.push('\n');
    }
    fs::write(&a.out, out).map_err(io_err(&a.out)).stage("writing predictions")?;
    Ok(worst)
}

fn cmd_simulate(a: &SimulateArgs) -> std::result::Result<i32, Failure> {
    let cfg = a.dgp.config(a.run.seed).stage("configuration")?;
    let (data, _) = generate(&cfg).stage("simulating")?;
    save_csv(&data, &a.out).stage("writing data")?;
    let mut truth = String::from("x,theta0\n");
    for x in eval_grid() {
        let t = theta0(x).stage("simulating")?;
        let _ = writeln!(truth, "{x:?},{t:?}");
    }
    let path = sidecar(&a.out, "truth");
    fs::write(&path, truth).map_err(io_err(&path)).stage("writing truth")?;
    Ok(EXIT_OK)
}

fn estimator(kind: EstimatorArg, config: DrrfConfig) -> Estimator {
    match kind {
        EstimatorArg::Drrf => Estimator::Drrf(config),
        EstimatorArg::DrrfCv => Estimator::DrrfCv(config),
        EstimatorArg::Oracle => Estimator::Oracle(config),
        EstimatorArg::PlugIn => Estimator::PlugIn(config),
        EstimatorArg::Zero => Estimator::Zero,
    }
}

fn write_file(path: &Path, stage: &'static str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> std::result::Result<(), Failure> {
    let mut buf = Vec::new();
    body(&mut buf).map_err(io_err(path)).stage(stage)?;
    fs::write(path, buf).map_err(io_err(path)).stage(stage)
}

fn cmd_benchmark(a: &BenchmarkArgs) -> std::result::Result<i32, Failure> {
    let cfg = a.dgp.config(a.run.seed).stage("configuration")?;
    let config = a.forest.config();
    let timings = !a.run.deterministic_output;
    let mut reports = Vec::new();
    for &kind in &a.estimators {
        let report = run_rmse_experiment(&cfg, &estimator(kind, config.clone()), a.reps).stage("benchmark")?;
        reports.push(report);
    }
    write_file(&a.out, "writing report", |buf| {
        let mut first = true;
        for r in &reports {
            if !first {
                buf.extend_from_slice(b"\n");
            }
            first = false;
            if reports.len() > 1 {
                buf.extend_from_slice(format!("# {}\n", r.label).as_bytes());
            }
            r.write_reps_csv(buf, timings)?;
        }
        Ok(())
    })?;
    write_file(&sidecar(&a.out, "summary"), "writing summary", |buf| {
        write_summary_csv(&reports, buf, timings)
    })?;
    if !timings {
        write_file(&sidecar(&a.out, "timings"), "writing timings", |buf| {
            for r in &reports {
                buf.extend_from_slice(format!("# {}\n", r.label).as_bytes());
                r.write_timings_csv(buf)?;
            }
            Ok(())
        })?;
    }
    for r in &reports {
        println!(
            "{} {} k={} reps={} failures={} mean_rmse={:.4} sd_rmse={:.4}",
            r.label,
            r.config.family,
            r.config.k,
            r.reps.len(),
            r.failures,
            r.mean_rmse(),
            r.sd_rmse()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_coverage(a: &CoverageArgs) -> std::result::Result<i32, Failure> {
    let cfg = a.dgp.config(a.run.seed).stage("configuration")?;
    let est = estimator(a.estimator, a.forest.config());
    let report = run_coverage_experiment(&cfg, &est, a.reps, a.level, &midpoint_grid(a.points)).stage("coverage")?;
    write_file(&a.out, "writing coverage", |buf| report.write_csv(buf))?;
    println!(
        "{} {} reps={} failures={} level={} coverage={:.4}",
        report.label,
        cfg.family,
        report.reps,
        report.failures,
        report.level,
        report.aggregate()
    );
    Ok(EXIT_OK)
}
