mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nmfre::complexity::{calibrate_cap, write_lookup_csv};
use nmfre::data::{from_labeled, orthodont_csv, parse_matrix_csv};
use nmfre::inference::{infer, InferenceConfig, InferenceReport, TestSide};
use nmfre::simulation::{
    run_monte_carlo, write_baseline_table, write_replicates, write_stress_table, ErrorDist,
    MonteCarloSummary, Scenario, SimDesign,
};
use nmfre::{fit, init_covariate_nmf, DataSet, FitConfig, FitResult, NmfreError};

use manifest::{Run, RunManifest};

const EXIT_IO: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_SINGULAR: u8 = 4;
const EXIT_SIMULATION: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "nmfre", version, about = "NMF with covariates and random effects")]
struct Cli {
    /// Worker threads for restarts, bootstrap and Monte Carlo replicates.
    #[arg(long, global = true, env = "NMFRE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model and write fit.json, diagnostics.csv and trace.csv.
    Fit(FitArgs),
    /// Derive the df cap from a reference penalty and write the lambda-r lookup.
    CalibrateCap(CalibrateArgs),
    /// Sandwich and bootstrap inference for a saved fit.
    Infer(InferArgs),
    /// Baseline Monte Carlo cell.
    Simulate(SimulateArgs),
    /// Saturation stress-test cell.
    Stress(StressArgs),
    /// Replay the command recorded in a manifest into a new output directory.
    Rerun(RerunArgs),
}

impl Command {
    fn out_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Self::Fit(a) => Some(&mut a.out),
            Self::CalibrateCap(a) => Some(&mut a.out),
            Self::Infer(a) => Some(&mut a.out),
            Self::Simulate(a) => Some(&mut a.mc.out),
            Self::Stress(a) => Some(&mut a.mc.out),
            Self::Rerun(_) => None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// Response matrix CSV (variables by units, non-negative).
    #[arg(long, requires = "a", required_unless_present = "orthodont")]
    y: Option<PathBuf>,
    /// Covariate matrix CSV (covariates by units).
    #[arg(long, requires = "y", required_unless_present = "orthodont")]
    a: Option<PathBuf>,
    /// Use the bundled Orthodont growth data.
    #[arg(long, conflicts_with_all = ["y", "a"])]
    orthodont: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
struct FitOverrides {
    /// FitConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    q: Option<usize>,
    /// Cap ratio df_max/(NQ), or "off".
    #[arg(long, value_parser = parse_cap)]
    cap: Option<CapSetting>,
    #[arg(long)]
    lambda_init: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    maxit: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct CapSetting(Option<f64>);

fn parse_cap(s: &str) -> std::result::Result<CapSetting, String> {
    match s {
        "off" | "none" => Ok(CapSetting(None)),
        _ => s
            .parse::<f64>()
            .map(|v| CapSetting(Some(v)))
            .map_err(|_| format!("expected a ratio in (0, 1] or \"off\", got {s:?}")),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitOverrides,
    /// Smallest acceptable ridge penalty.
    #[arg(long)]
    lambda_min: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum SideArg {
    One,
    Two,
}

#[derive(Debug, Clone, Args, Serialize)]
struct InferArgs {
    /// fit.json written by `nmfre fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Override the data paths stored in fit.json.
    #[arg(long, requires = "a")]
    y: Option<PathBuf>,
    #[arg(long, requires = "y")]
    a: Option<PathBuf>,
    /// InferenceConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    side: Option<SideArg>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// Include the bootstrap replicates in report.json.
    #[arg(long)]
    dump_replicates: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum ErrorArg {
    Gaussian,
    ExpCentered,
}

impl From<ErrorArg> for ErrorDist {
    fn from(e: ErrorArg) -> Self {
        match e {
            ErrorArg::Gaussian => ErrorDist::Gaussian,
            ErrorArg::ExpCentered => ErrorDist::ExpCentered,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum ScenarioArg {
    Null,
    Alt,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Null => Scenario::NullBoundary,
            ScenarioArg::Alt => Scenario::AlternativeInterior,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct McArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    error: ErrorArg,
    #[arg(long, value_enum, default_value = "null")]
    scenario: ScenarioArg,
    /// Monte Carlo replicates.
    #[arg(long)]
    r: Option<usize>,
    /// Bootstrap draws per replicate.
    #[arg(long)]
    b: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full-scale run with R = B = 1000.
    #[arg(long)]
    full: bool,
    /// Also write one CSV line per replicate.
    #[arg(long)]
    dump_replicates: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 27)]
    n: usize,
    /// Complete SimDesign JSON; replaces the design selected by the flags.
    #[arg(long)]
    design: Option<PathBuf>,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct StressArgs {
    /// Cap ratio df_max/(NQ), or "off".
    #[arg(long, value_parser = parse_cap, default_value = "0.21")]
    cap: CapSetting,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Where the fitted data came from, so `infer` can reload it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DataSource {
    Bundled { name: String },
    Files { y: PathBuf, a: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitFile {
    data: DataSource,
    config: FitConfig,
    result: FitResult,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<NmfreError>() {
            return match e {
                NmfreError::Io { .. } => EXIT_IO,
                NmfreError::SingularInformation { .. } => EXIT_SINGULAR,
                NmfreError::SimulationFailure { .. } => EXIT_SIMULATION,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_VALIDATION;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn run(cli: Cli, argv: Vec<String>) -> Result<u8> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    dispatch(cli.command, argv)
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<u8> {
    match command {
        Command::Fit(a) => cmd_fit(a, argv),
        Command::CalibrateCap(a) => cmd_calibrate(a, argv),
        Command::Infer(a) => cmd_infer(a, argv),
        Command::Simulate(a) => cmd_simulate(a, argv),
        Command::Stress(a) => cmd_stress(a, argv),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

fn cmd_rerun(args: RerunArgs) -> Result<u8> {
    let manifest = RunManifest::read(&args.manifest)?;
    let mut argv = vec!["nmfre".to_string()];
    argv.extend(manifest.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| anyhow!(NmfreError::InvalidConfig(e.to_string())))?;
    let mut command = cli.command;
    let out = command
        .out_mut()
        .ok_or_else(|| anyhow!(NmfreError::InvalidConfig("cannot rerun a rerun".into())))?;
    *out = args.out.clone();
    // Record the replayed command with its new output directory.
    let mut replay = manifest.argv.clone();
    if let Some(i) = replay.iter().position(|s| s == "--out") {
        if i + 1 < replay.len() {
            replay[i + 1] = args.out.display().to_string();
        }
    }
    dispatch(command, replay)
}

fn load_data(run: &mut Run, args: &DataArgs) -> Result<(DataSet, DataSource)> {
    if args.orthodont {
        let (y, a) = orthodont_csv();
        run.record_input("bundled:orthodont_Y.csv", y.as_bytes());
        run.record_input("bundled:orthodont_A.csv", a.as_bytes());
        let data = nmfre::orthodont();
        return Ok((data, DataSource::Bundled { name: "orthodont".into() }));
    }
    let (y, a) = match (&args.y, &args.a) {
        (Some(y), Some(a)) => (y, a),
        _ => bail!(NmfreError::InvalidConfig("both --y and --a are required".into())),
    };
    let data = read_dataset(run, y, a)?;
    let source = DataSource::Files {
        y: y.canonicalize().unwrap_or_else(|_| y.clone()),
        a: a.canonicalize().unwrap_or_else(|_| a.clone()),
    };
    Ok((data, source))
}

fn read_dataset(run: &mut Run, y: &Path, a: &Path) -> Result<DataSet> {
    let y_bytes = run.read_input(y).map_err(|e| io_error(e, y))?;
    let a_bytes = run.read_input(a).map_err(|e| io_error(e, a))?;
    let ym = parse_matrix_csv(y_bytes.as_slice(), y)?;
    let am = parse_matrix_csv(a_bytes.as_slice(), a)?;
    Ok(from_labeled(ym, am)?)
}

fn io_error(e: anyhow::Error, path: &Path) -> anyhow::Error {
    match e.downcast::<std::io::Error>() {
        Ok(source) => anyhow!(NmfreError::Io { path: path.to_path_buf(), source }),
        Err(e) => e,
    }
}

fn fit_config(over: &FitOverrides) -> Result<FitConfig> {
    let mut cfg = match &over.config {
        Some(p) => FitConfig::from_json_file(p)?,
        None => FitConfig::default(),
    };
    if let Some(q) = over.q {
        cfg.q = q;
    }
    if let Some(CapSetting(c)) = over.cap {
        cfg.cap_ratio = c;
    }
    if let Some(l) = over.lambda_init {
        cfg.lambda_init = l;
    }
    if let Some(r) = over.restarts {
        cfg.n_restarts = r;
    }
    if let Some(m) = over.maxit {
        cfg.maxit = m;
    }
    if let Some(t) = over.tol {
        cfg.tol = t;
    }
    if let Some(s) = over.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_snapshot<A: Serialize, C: Serialize>(args: &A, effective: &C) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "args": args, "effective": effective }))
}

/// The model-size and random-effects summary row.
fn diagnostics_csv(data: &DataSet, res: &FitResult) -> String {
    let d = &res.diagnostics;
    let q = res.params.q();
    let r_max = d.cap_ratio.map_or("off".to_string(), |r| format!("{r:.2}"));
    format!(
        "N,P,Q,NQ,df_U,r,r_max,lambda,Cap\n{},{},{},{},{:.2},{:.3},{},{:.2},{}\n",
        data.n(),
        data.p(),
        q,
        data.n() * q,
        d.df_u,
        d.saturation_ratio,
        r_max,
        d.lambda_final,
        if d.cap_ever_activated { "Yes" } else { "No" }
    )
}

fn cmd_fit(args: FitArgs, argv: Vec<String>) -> Result<u8> {
    let mut run = Run::new(&args.out)?;
    let (data, source) = load_data(&mut run, &args.data)?;
    let cfg = fit_config(&args.fit)?;
    let res = fit(&data, &cfg)?;

    let file = FitFile { data: source, config: cfg.clone(), result: res.clone() };
    run.write("fit.json", serde_json::to_string_pretty(&file)?.as_bytes())?;
    let diag = diagnostics_csv(&data, &res);
    run.write("diagnostics.csv", diag.as_bytes())?;
    let mut trace = Vec::new();
    res.trace.write_csv(&mut trace)?;
    run.write("trace.csv", &trace)?;
    print!("{diag}");

    let code = if res.converged {
        0
    } else {
        eprintln!("warning: no convergence within {} iterations; outputs hold the last iterate", cfg.maxit);
        EXIT_NOT_CONVERGED
    };
    run.finish("fit", argv, config_snapshot(&args, &cfg)?, cfg.rng_seed, code)?;
    Ok(code)
}

fn cmd_calibrate(args: CalibrateArgs, argv: Vec<String>) -> Result<u8> {
    let mut run = Run::new(&args.out)?;
    let (data, _) = load_data(&mut run, &args.data)?;
    let cfg = fit_config(&args.fit)?;
    let (x_fix, _) = init_covariate_nmf(&data, &cfg)?;
    let cal = calibrate_cap(&x_fix, args.lambda_min, data.n())?;
    let mut lookup = Vec::new();
    write_lookup_csv(&cal.table, &mut lookup)?;
    run.write("lookup.csv", &lookup)?;
    run.write("calibration.json", serde_json::to_string_pretty(&cal)?.as_bytes())?;
    println!("df_max,r_max\n{:.4},{:.4}", cal.df_max, cal.r_max);
    run.finish("calibrate-cap", argv, config_snapshot(&args, &cfg)?, cfg.rng_seed, 0)?;
    Ok(0)
}

#[derive(Serialize)]
struct ReportJson<'a> {
    #[serde(flatten)]
    report: &'a InferenceReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    replicates: Option<Vec<Vec<f64>>>,
}

fn cmd_infer(args: InferArgs, argv: Vec<String>) -> Result<u8> {
    let mut run = Run::new(&args.out)?;
    let fit_bytes = run.read_input(&args.fit).map_err(|e| io_error(e, &args.fit))?;
    let file: FitFile = serde_json::from_slice(&fit_bytes)
        .with_context(|| format!("parsing {}", args.fit.display()))?;
    let data = match (&args.y, &args.a, &file.data) {
        (Some(y), Some(a), _) => read_dataset(&mut run, y, a)?,
        (_, _, DataSource::Files { y, a }) => read_dataset(&mut run, y, a)?,
        (_, _, DataSource::Bundled { .. }) => {
            load_data(&mut run, &DataArgs { y: None, a: None, orthodont: true })?.0
        }
    };

    let mut cfg = match &args.config {
        Some(p) => InferenceConfig::from_json_file(p)?,
        None => InferenceConfig::default(),
    };
    if let Some(b) = args.b {
        cfg.b = b;
    }
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    if let Some(side) = args.side {
        cfg.test_side = match side {
            SideArg::One => TestSide::OneSided,
            SideArg::Two => TestSide::TwoSided,
        };
    }
    if let Some(l) = args.ci_level {
        cfg.ci_level = l;
    }

    let report = infer(&data, &file.result.params, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    run.write("report.csv", &csv)?;
    let replicates = if args.dump_replicates {
        report
            .replicates
            .as_ref()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
    } else {
        None
    };
    let json = serde_json::to_string_pretty(&ReportJson { report: &report, replicates })?;
    run.write("report.json", json.as_bytes())?;
    print!("{}", String::from_utf8_lossy(&csv));
    run.finish("infer", argv, config_snapshot(&args, &cfg)?, cfg.rng_seed, 0)?;
    Ok(0)
}

fn apply_mc(design: &mut SimDesign, mc: &McArgs) {
    if mc.full {
        design.r = 1000;
        design.b = 1000;
    }
    if let Some(r) = mc.r {
        design.r = r;
    }
    if let Some(b) = mc.b {
        design.b = b;
    }
    design.seed = mc.seed;
}

fn write_mc(
    mut run: Run,
    command: &str,
    argv: Vec<String>,
    args_json: serde_json::Value,
    design: &SimDesign,
    summary: &MonteCarloSummary,
    table: &[u8],
    dump: bool,
) -> Result<u8> {
    run.write("summary.csv", table)?;
    run.write("summary.json", serde_json::to_string_pretty(summary)?.as_bytes())?;
    if dump {
        let mut rec = Vec::new();
        write_replicates(&summary.records, &mut rec)?;
        run.write("replicates.csv", &rec)?;
    }
    print!("{}", String::from_utf8_lossy(table));
    if summary.failed > 0 {
        eprintln!("warning: {} of {} replicates failed and were excluded", summary.failed, summary.r);
    }
    let config = serde_json::json!({ "args": args_json, "design": design });
    run.finish(command, argv, config, design.seed, 0)?;
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs, argv: Vec<String>) -> Result<u8> {
    let mut run = Run::new(&args.mc.out)?;
    let mut design = match &args.design {
        Some(p) => {
            let bytes = run.read_input(p).map_err(|e| io_error(e, p))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimDesign::baseline(args.n, args.mc.error.into(), args.mc.scenario.into()),
    };
    if args.design.is_none() {
        apply_mc(&mut design, &args.mc);
    }
    let summary = run_monte_carlo(&design)?;
    let mut table = Vec::new();
    write_baseline_table(std::slice::from_ref(&summary), &mut table)?;
    let dump = args.mc.dump_replicates;
    write_mc(run, "simulate", argv, serde_json::to_value(&args)?, &design, &summary, &table, dump)
}

fn cmd_stress(args: StressArgs, argv: Vec<String>) -> Result<u8> {
    let run = Run::new(&args.mc.out)?;
    let mut design = SimDesign::stress(args.cap.0, args.mc.error.into(), args.mc.scenario.into());
    apply_mc(&mut design, &args.mc);
    let summary = run_monte_carlo(&design)?;
    let mut table = Vec::new();
    write_stress_table(std::slice::from_ref(&summary), &mut table)?;
    let dump = args.mc.dump_replicates;
    write_mc(run, "stress", argv, serde_json::to_value(&args)?, &design, &summary, &table, dump)
}
