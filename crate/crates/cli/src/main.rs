mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowcheck::flow::{load_flow, save_flow, train_flow};
use flowcheck::global_diag::{emit_ppplot, global_test, sbc_ranks, sbc_test, write_json, GlobalConfig};
use flowcheck::independence::{default_neighbourhood, global_independence, local_independence};
use flowcheck::local_diag::{build_indicator_datasets, emit_local_ppplot, fit_bank, sweep, write_sweep_csv};
use flowcheck::numerics::{Matrix, RngStream};
use flowcheck::pit::{normal_scores, pit_matrix};
use flowcheck::tasks::{inject, simulate, MiscalibrationSpec, Task, TaskSpec};
use flowcheck::{AlphaGrid, CalibrationDataset, ConditionalEstimator, Decision, RegressorKind};
use serde::Serialize;

use config::{pick, RunConfig};

/// Misuse of the command line or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "flowcheck", version, about = "Global and local consistency diagnostics for conditional normalizing flows")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset of (θ, x) pairs from a synthetic task.
    Simulate(SimulateArgs),
    /// Train a conditional flow on a dataset.
    Train(TrainArgs),
    /// Per-covariate uniformity tests of the PIT, PP-plot data and an SBC baseline.
    DiagnoseGlobal(GlobalArgs),
    /// Regression-based local tests at evaluation points or along a sweep.
    DiagnoseLocal(LocalArgs),
    /// Identity-covariance test of the PIT normal scores.
    Independence(IndependenceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Task name: gaussian-linear or gain-toy.
    #[arg(long)]
    task: String,
    /// Number of pairs.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Write the binary format instead of CSV.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output flow file.
    #[arg(long)]
    out: PathBuf,
    /// Maximum epochs [default: 60].
    #[arg(long)]
    epochs: Option<usize>,
    /// Flow layers [default: 2].
    #[arg(long)]
    layers: Option<usize>,
    /// Conditioner hidden width [default: 16].
    #[arg(long)]
    hidden: Option<usize>,
    /// Adam learning rate [default: 0.005].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Training seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimatorArgs {
    /// Calibration dataset (held out from training).
    #[arg(long)]
    data: PathBuf,
    /// Trained flow file.
    #[arg(long, conflicts_with = "oracle")]
    flow: Option<PathBuf>,
    /// Use the task's exact posterior instead of a trained flow.
    #[arg(long)]
    oracle: bool,
    /// Task for --oracle and --sweep [default: gaussian-linear].
    #[arg(long)]
    task: Option<String>,
    /// Wrap the estimator in a miscalibration, e.g. dispersion:1.5.
    #[arg(long)]
    inject: Option<String>,
    /// Dataset the flow was trained on; must differ from --data.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Significance level [default: 0.05].
    #[arg(long)]
    level: Option<f64>,
    /// Seed for null replicates [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GlobalArgs {
    #[command(flatten)]
    est: EstimatorArgs,
    /// Number of α grid points [default: 100].
    #[arg(long)]
    grid: Option<usize>,
    /// Null replicates [default: 999].
    #[arg(long)]
    replicates: Option<usize>,
    /// Posterior draws per pair for the SBC baseline, 0 to skip [default: 100].
    #[arg(long)]
    sbc_draws: Option<usize>,
}

#[derive(Args)]
struct LocalArgs {
    #[command(flatten)]
    est: EstimatorArgs,
    /// CSV of evaluation points with header x_1..x_d.
    #[arg(long, conflicts_with = "sweep")]
    points: Option<PathBuf>,
    /// Gain sweep gain:LO:HI:STEPS (gain-toy task).
    #[arg(long)]
    sweep: Option<String>,
    /// Latent μ used along the gain sweep.
    #[arg(long, default_value_t = 1.5)]
    sweep_mu: f64,
    /// Number of α grid points [default: 19].
    #[arg(long)]
    grid: Option<usize>,
    /// Null replicates, 0 for statistics only [default: 99].
    #[arg(long)]
    replicates: Option<usize>,
    /// Regressor family: logistic or mlp [default: logistic].
    #[arg(long)]
    regressor: Option<String>,
    /// Hidden width of the mlp regressor [default: 16].
    #[arg(long)]
    hidden: Option<usize>,
    /// Run even when no global bundle exists in --out.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct IndependenceArgs {
    #[command(flatten)]
    est: EstimatorArgs,
    /// Null replicates [default: 999].
    #[arg(long)]
    replicates: Option<usize>,
    /// Evaluation points for local tests (header x_1..x_d).
    #[arg(long)]
    points: Option<PathBuf>,
    /// Neighbourhood size for local tests [default: max(10 m, N/10)].
    #[arg(long)]
    k: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Decision::Accept) => ExitCode::from(0),
        Ok(Decision::Reject) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<flowcheck::Error>() {
        Some(
            flowcheck::Error::Config(_)
            | flowcheck::Error::InvalidArgument(_)
            | flowcheck::Error::Contract(_)
            | flowcheck::Error::Shape(_)
            | flowcheck::Error::Domain(_)
            | flowcheck::Error::Leakage(_),
        ) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<Decision> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::DiagnoseGlobal(a) => cmd_global(a, &cfg),
        Command::DiagnoseLocal(a) => cmd_local(a, &cfg),
        Command::Independence(a) => cmd_independence(a, &cfg),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn task_from(name: Option<&str>, cfg: &RunConfig) -> Result<Task> {
    let spec = match (name, &cfg.task) {
        (Some(n), _) => TaskSpec::from_name(n)?,
        (None, Some(spec)) => spec.clone(),
        (None, None) => TaskSpec::from_name("gaussian-linear")?,
    };
    Ok(spec.build()?)
}

fn cmd_simulate(a: SimulateArgs, cfg: &RunConfig) -> Result<Decision> {
    let task = task_from(Some(&a.task), cfg)?;
    let data = simulate(task.simulator(), a.n, a.seed)?;
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    if a.binary {
        data.write_binary(&a.out)?;
    } else {
        data.write_csv(&a.out)?;
    }
    println!("wrote {} pairs of task {} to {}", data.len(), a.task, a.out.display());
    Ok(Decision::Accept)
}

fn cmd_train(a: TrainArgs, cfg: &RunConfig) -> Result<Decision> {
    require_file(&a.data, "training dataset")?;
    let mut tc = cfg.flow.clone().unwrap_or_default();
    tc.epochs = pick(a.epochs, None, tc.epochs);
    tc.layers = pick(a.layers, None, tc.layers);
    tc.hidden = pick(a.hidden, None, tc.hidden);
    tc.learning_rate = pick(a.learning_rate, None, tc.learning_rate);
    tc.seed = pick(a.seed, cfg.seed, tc.seed);
    let data = CalibrationDataset::read(&a.data)?;
    let flow = train_flow(&data, &tc)?;
    save_flow(&flow, &a.out)?;
    let rec = flow.training_record().context("trained flow has no training record")?;
    println!(
        "trained {} epochs (best {}, validation nll {:.4}); wrote {}",
        rec.epochs_run,
        rec.best_epoch,
        rec.best_validation_nll,
        a.out.display()
    );
    Ok(Decision::Accept)
}

/// Loads the calibration data and the estimator after checking every
/// referenced file and the train/calibration separation.
fn prepare(est: &EstimatorArgs, cfg: &RunConfig, extra: &[(&Path, &str)]) -> Result<(CalibrationDataset, Box<dyn ConditionalEstimator>)> {
    require_file(&est.data, "calibration dataset")?;
    if let Some(f) = &est.flow {
        require_file(f, "flow file")?;
    }
    for (p, what) in extra {
        require_file(p, what)?;
    }
    if let Some(train) = est.train_data.as_ref().or(cfg.train_data.as_ref()) {
        require_file(train, "training dataset")?;
        if std::fs::canonicalize(train)? == std::fs::canonicalize(&est.data)? {
            return Err(usage("calibration dataset must not be the training dataset"));
        }
    }
    let base: Box<dyn ConditionalEstimator> = match (&est.flow, est.oracle) {
        (Some(f), _) => Box::new(load_flow(f).with_context(|| format!("loading {}", f.display()))?),
        (None, true) => task_from(est.task.as_deref(), cfg)?.oracle()?,
        (None, false) => return Err(usage("pass either --flow FILE or --oracle")),
    };
    let estimator: Box<dyn ConditionalEstimator> = match est.inject.as_ref().or(cfg.inject.as_ref()) {
        Some(spec) => Box::new(inject(base, MiscalibrationSpec::parse(spec)?)?),
        None => base,
    };
    let data = CalibrationDataset::read(&est.data)?;
    Ok((data, estimator))
}

#[derive(Serialize)]
struct GlobalBundle<'a> {
    global: &'a flowcheck::GlobalReport,
    sbc: Option<flowcheck::global_diag::SbcReport>,
}

fn cmd_global(a: GlobalArgs, cfg: &RunConfig) -> Result<Decision> {
    let (data, est) = prepare(&a.est, cfg, &[])?;
    let gc = GlobalConfig {
        level: pick(a.est.level, cfg.level, 0.05),
        replicates: pick(a.replicates, cfg.replicates, 999),
        seed: pick(a.est.seed, cfg.seed, 0),
    };
    let grid = AlphaGrid::equispaced(pick(a.grid, cfg.grid_size, 100))?;
    let pit = pit_matrix(&est, &data)?;
    let report = global_test(&pit, &grid, &gc)?;
    let draws = pick(a.sbc_draws, cfg.sbc_draws, 100);
    let sbc = if draws > 0 {
        Some(sbc_test(&sbc_ranks(&est, &data, draws, gc.seed)?, draws, gc.level)?)
    } else {
        None
    };
    let dir = a.est.out.join("global");
    write_json(&GlobalBundle { global: &report, sbc: sbc.clone() }, dir.join("summary.json"))?;
    emit_ppplot(&report, &dir)?;
    pit.write_csv(dir.join("pit.csv"))?;
    match report.decision {
        Decision::Accept => println!("ACCEPT global uniformity (adjusted p: {})", fmt_list(&report.p_adjusted)),
        Decision::Reject => println!(
            "REJECT global uniformity for covariates {} (adjusted p: {})",
            join(&report.rejected),
            fmt_list(&report.p_adjusted)
        ),
    }
    if let Some(s) = &sbc {
        println!("SBC baseline: {} (adjusted p: {})", s.decision, fmt_list(&s.p_adjusted));
    }
    Ok(report.decision)
}

fn parse_sweep(spec: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || usage(format!("sweep '{spec}' must look like gain:LO:HI:STEPS"));
    if parts.len() != 4 || parts[0] != "gain" {
        return Err(bad());
    }
    let lo: f64 = parts[1].parse().map_err(|_| bad())?;
    let hi: f64 = parts[2].parse().map_err(|_| bad())?;
    let steps: usize = parts[3].parse().map_err(|_| bad())?;
    if steps == 0 || hi < lo {
        return Err(bad());
    }
    Ok((lo, hi, steps))
}

fn cmd_local(a: LocalArgs, cfg: &RunConfig) -> Result<Decision> {
    let global_summary = a.est.out.join("global").join("summary.json");
    if !global_summary.is_file() {
        if a.force {
            log::warn!("no global bundle at {}; running the local check anyway", global_summary.display());
        } else {
            return Err(usage(format!(
                "run diagnose-global first (no {}), or pass --force",
                global_summary.display()
            )));
        }
    }
    let extra: Vec<(&Path, &str)> = a.points.iter().map(|p| (p.as_path(), "points file")).collect();
    let (data, est) = prepare(&a.est, cfg, &extra)?;

    let (coord_names, coords, path) = match (&a.points, &a.sweep) {
        (Some(p), _) => {
            let pts = flowcheck::dataset::read_points(p)?;
            let names = (1..=pts.ncols()).map(|j| format!("x_{j}")).collect::<Vec<_>>();
            (names, pts.clone(), pts)
        }
        (None, Some(spec)) => {
            let (lo, hi, steps) = parse_sweep(spec)?;
            let Task::Gain(task) = task_from(a.est.task.as_deref(), cfg)? else {
                return Err(usage("--sweep gain:... needs the gain-toy task (--task gain-toy)"));
            };
            let eps = RngStream::new(pick(a.est.seed, cfg.seed, 0), u64::MAX).normals(data.obs_dim());
            let gains: Vec<f64> = (0..steps)
                .map(|s| if steps == 1 { lo } else { lo + (hi - lo) * s as f64 / (steps - 1) as f64 })
                .collect();
            let mut path = Matrix::zeros((steps, data.obs_dim()));
            for (s, &g) in gains.iter().enumerate() {
                let x = task.observation(a.sweep_mu, g, &eps);
                if x.len() != data.obs_dim() {
                    return Err(usage("gain task dimension does not match the dataset"));
                }
                for (j, v) in x.into_iter().enumerate() {
                    path[[s, j]] = v;
                }
            }
            let coords = Matrix::from_shape_vec((steps, 1), gains).expect("one column");
            (vec!["g".to_string()], coords, path)
        }
        (None, None) => return Err(usage("pass --points FILE or --sweep gain:LO:HI:STEPS")),
    };

    let level = pick(a.est.level, cfg.level, 0.05);
    let replicates = pick(a.replicates, cfg.replicates, 99);
    let seed = pick(a.est.seed, cfg.seed, 0);
    let grid = AlphaGrid::equispaced(pick(a.grid, cfg.grid_size, 19))?;
    let mut rc = cfg.regressor.clone().unwrap_or_default();
    if let Some(kind) = &a.regressor {
        rc.kind = match kind.as_str() {
            "logistic" => RegressorKind::Logistic,
            "mlp" => RegressorKind::Mlp,
            other => return Err(usage(format!("unknown regressor '{other}' (logistic or mlp)"))),
        };
    }
    rc.hidden = pick(a.hidden, None, rc.hidden);
    rc.seed = seed;

    if path.ncols() != data.obs_dim() {
        return Err(flowcheck::Error::Contract(format!(
            "evaluation point has dimension {}, expected d = {}",
            path.ncols(),
            data.obs_dim()
        ))
        .into());
    }
    if replicates > 0 {
        flowcheck::stats::check_replicates(replicates, level, data.theta_dim())?;
    }
    let pit = pit_matrix(&est, &data)?;
    let ds = build_indicator_datasets(&pit, &data, &grid)?;
    let bank = fit_bank(&ds, &rc, replicates, seed)?;
    let reports = sweep(&bank, &path, level)?;

    let dir = a.est.out.join("local");
    std::fs::create_dir_all(&dir)?;
    write_json(&reports, dir.join("summary.json"))?;
    write_json(bank.health(), dir.join("bank_health.json"))?;
    if a.sweep.is_some() {
        write_sweep_csv(dir.join("sweep.csv"), &coord_names, &coords, &reports)?;
    }
    for (j, r) in reports.iter().enumerate() {
        emit_local_ppplot(r, &dir, &format!("point_{}", j + 1))?;
    }
    let mut decision = Decision::Accept;
    for (j, r) in reports.iter().enumerate() {
        let stats = fmt_list(&r.statistics);
        match (&r.decision, &r.p_adjusted) {
            (Some(d), Some(p)) => {
                println!("point {}: {d} (T: {stats}; adjusted p: {})", j + 1, fmt_list(p));
                if d.is_reject() {
                    decision = Decision::Reject;
                }
            }
            _ => println!("point {}: T: {stats} (no null replicates)", j + 1),
        }
    }
    Ok(decision)
}

#[derive(Serialize)]
struct IndependenceBundle {
    global: flowcheck::independence::CovarianceReport,
    local: Vec<flowcheck::independence::CovarianceReport>,
    level: f64,
    decision: Decision,
}

fn cmd_independence(a: IndependenceArgs, cfg: &RunConfig) -> Result<Decision> {
    let extra: Vec<(&Path, &str)> = a.points.iter().map(|p| (p.as_path(), "points file")).collect();
    let (data, est) = prepare(&a.est, cfg, &extra)?;
    let level = pick(a.est.level, cfg.level, 0.05);
    let replicates = pick(a.replicates, cfg.replicates, 999);
    let seed = pick(a.est.seed, cfg.seed, 0);
    let pit = pit_matrix(&est, &data)?;
    let z = normal_scores(&pit)?.values;
    let global = global_independence(&z, replicates, seed)?;
    let mut local = Vec::new();
    if let Some(p) = &a.points {
        let pts = flowcheck::dataset::read_points(p)?;
        let k = pick(a.k, cfg.neighbourhood, default_neighbourhood(z.ncols(), z.nrows()));
        for row in pts.rows() {
            local.push(local_independence(&z, &data.x, &row.to_vec(), k, replicates, seed)?);
        }
    }
    let decision = if std::iter::once(&global).chain(&local).any(|r| r.p_value < level) {
        Decision::Reject
    } else {
        Decision::Accept
    };
    write_json(
        &IndependenceBundle {
            global: global.clone(),
            local: local.clone(),
            level,
            decision,
        },
        a.est.out.join("independence.json"),
    )?;
    println!(
        "{decision} identity covariance (statistic {:.6}, p {}); {}",
        global.statistic, global.p_value, global.caveat
    );
    for (j, r) in local.iter().enumerate() {
        println!("point {}: statistic {:.6}, p {}", j + 1, r.statistic, r.p_value);
    }
    for w in global.warnings.iter().chain(local.iter().flat_map(|r| &r.warnings)) {
        log::warn!("{w}");
    }
    Ok(decision)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", ")
}

fn join(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}
