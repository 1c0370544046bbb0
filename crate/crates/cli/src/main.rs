use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vstree::bandit::{run_bandit, AgentConfig, AgentKind, Environment, ExplorationEnv, LinearPortfolioEnv, ReplayEnv};
use vstree::data::{load_inputs, load_table, read_schema, synth};
use vstree::model_file::{load_model, save_model};
use vstree::ood::ood_report;
use vstree::predictive::{epistemic_variances, regression_metrics, summarize, sample_means, Model, Units};
use vstree::vsgbm::fit_vsgbm;
use vstree::vst::{fit_vst, TrainTrace};
use vstree::{with_model, Dataset, Error, LeafKind, SynthKind, TrainConfig, VsgbmConfig};

#[derive(Parser)]
#[command(name = "vstree", version, about = "Variational soft decision trees for probabilistic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a tree (or a boosted ensemble with --trees > 1) and save it.
    Train(TrainArgs),
    /// Report test log-likelihood, RMSE and epistemic std.
    Eval(EvalArgs),
    /// Score in- and out-of-distribution inputs by epistemic variance.
    Ood(OodArgs),
    /// Run a Thompson-sampling contextual bandit.
    Bandit(BanditArgs),
    /// Posterior function draws along a one-dimensional grid.
    Sample(SampleArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TableArgs {
    /// Input table (header row, comma separated).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    /// File listing categorical columns, one per line.
    #[arg(long)]
    schema: Option<PathBuf>,
}

impl TableArgs {
    fn categorical(&self) -> vstree::Result<Vec<String>> {
        self.schema.as_ref().map(read_schema).transpose().map(Option::unwrap_or_default)
    }

    fn load(&self) -> vstree::Result<Dataset> {
        load_table(&self.data, &self.target, &self.categorical()?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LeafArg {
    Constant,
    Linear,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    table: TableArgs,
    /// Where to write the model file.
    #[arg(long)]
    out: PathBuf,
    /// Training-log table; printed to stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=20))]
    depth: u32,
    #[arg(long, value_enum, default_value = "linear")]
    leaf: LeafArg,
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long, default_value_t = 1.0)]
    prior_scale: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Number of boosted trees; more than one fits a boosted ensemble.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    trees: u32,
    #[arg(long, default_value_t = 3.0)]
    a_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    b_sigma: f64,
    /// Likelihood std of each boosted tree, in standardized target units.
    #[arg(long, default_value_t = 1.0)]
    weak_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    shrinkage: f64,
    #[arg(long)]
    allow_constant_target: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    table: TableArgs,
    #[arg(long, default_value_t = vstree::predictive::DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report in the target's original units instead of standardized ones.
    #[arg(long)]
    original_units: bool,
    /// Per-row table of predictive mean, std and epistemic std.
    #[arg(long)]
    rows: Option<PathBuf>,
}

#[derive(Args)]
struct OodArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    /// Column dropped from both inputs when present.
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = vstree::predictive::DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-input scores with a set label.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Exploration,
    Portfolio,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Vst,
    Random,
    Oracle,
}

#[derive(Args)]
struct BanditArgs {
    #[arg(long, value_enum, default_value = "exploration")]
    env: EnvArg,
    #[arg(long, value_enum, default_value = "vst")]
    agent: AgentArg,
    #[arg(long, default_value_t = 5000)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace table; printed to stdout when omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    arms: usize,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 50.0)]
    beta_env: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Context dimension of the portfolio environment.
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    portfolio_noise: f64,
    /// Logged table for the replay environment; `reward_*` columns are arms.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    retrain_every: usize,
    #[arg(long)]
    no_warm_start: bool,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=20))]
    depth: u32,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    warm_steps: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Feature to vary; the others are held at their training means.
    #[arg(long)]
    feature: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: SynthKind,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> vstree::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_log(mut w: impl Write, traces: &[TrainTrace]) -> vstree::Result<()> {
    writeln!(w, "tree,step,elbo,data_fit,kl")?;
    for (t, trace) in traces.iter().enumerate() {
        for r in &trace.rows {
            writeln!(w, "{t},{},{},{},{}", r.step, r.elbo, r.data_fit, r.kl)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn train(args: &TrainArgs) -> vstree::Result<()> {
    let data = args.table.load()?;
    let tree = TrainConfig {
        depth: args.depth as usize,
        leaf_kind: match args.leaf {
            LeafArg::Constant => LeafKind::Constant,
            LeafArg::Linear => LeafKind::Linear,
        },
        beta: args.beta,
        rank: args.rank,
        prior_scale: args.prior_scale,
        learning_rate: args.lr,
        steps: args.steps,
        batch_size: args.batch,
        mc_samples: args.mc_samples,
        seed: args.seed,
        mean_only_noise_std: args.weak_noise,
        allow_constant_target: args.allow_constant_target,
        log_every: args.log_every,
        ..TrainConfig::default()
    };
    let (model, traces, echo) = if args.trees == 1 {
        let fit = fit_vst(&data, &tree)?;
        let echo = serde_json::to_value(&tree).map_err(|e| Error::Format(e.to_string()))?;
        (Model::Vst(fit.model), vec![fit.trace], echo)
    } else {
        let config = VsgbmConfig {
            num_trees: args.trees as usize,
            a_sigma: args.a_sigma,
            b_sigma: args.b_sigma,
            tree,
            shrinkage: args.shrinkage,
        };
        let fit = fit_vsgbm(&data, &config)?;
        let echo = serde_json::to_value(&config).map_err(|e| Error::Format(e.to_string()))?;
        (Model::Vsgbm(fit.model), fit.traces, echo)
    };
    save_model(&model, echo, args.seed, &args.out)?;
    write_log(output(args.log.as_deref())?, &traces)
}

fn check_dim(model: &Model, data: &Dataset) -> vstree::Result<()> {
    if data.n_features() != model.feature_dim() {
        return Err(Error::Data(format!(
            "data has {} features, model expects {}",
            data.n_features(),
            model.feature_dim()
        )));
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> vstree::Result<()> {
    let model = load_model(&args.model)?.to_model()?;
    let data = args.table.load()?;
    check_dim(&model, &data)?;
    let units = if args.original_units { Units::Original } else { Units::Standardized };
    let metrics = with_model!(&model, m => regression_metrics(m, &data, args.samples, args.seed, units))?;
    let variances = with_model!(&model, m => epistemic_variances(m, &data.rows(), args.samples, args.seed))?;
    let scale = match units {
        Units::Standardized => 1.0,
        Units::Original => model.standardization().target_std,
    };
    let epi = variances.iter().map(|v| v.sqrt() * scale).sum::<f64>() / variances.len() as f64;
    let mut out = io::stdout().lock();
    writeln!(out, "n={}", data.len())?;
    writeln!(out, "units={}", if args.original_units { "original" } else { "standardized" })?;
    writeln!(out, "mean_loglik={}", metrics.mean_loglik)?;
    writeln!(out, "rmse={}", metrics.rmse)?;
    writeln!(out, "mean_epistemic_std={epi}")?;
    if let Some(path) = &args.rows {
        let s = with_model!(&model, m => summarize(m, &data, args.samples, args.seed, units))?;
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "row,target,predictive_mean,predictive_std,epistemic_std")?;
        for i in 0..data.len() {
            let y = match units {
                Units::Standardized => model.standardization().target(data.target[i]),
                Units::Original => data.target[i],
            };
            writeln!(w, "{i},{y},{},{},{}", s.predictive_mean[i], s.predictive_std[i], s.epistemic_std[i])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn ood(args: &OodArgs) -> vstree::Result<()> {
    let model = load_model(&args.model)?.to_model()?;
    let cats = args.schema.as_ref().map(read_schema).transpose()?.unwrap_or_default();
    let id = load_inputs(&args.id, &args.target, &cats)?;
    let od = load_inputs(&args.ood, &args.target, &cats)?;
    check_dim(&model, &id)?;
    check_dim(&model, &od)?;
    let report = with_model!(&model, m => ood_report(m, &id, &od, args.samples, args.seed))?;
    let mut out = io::stdout().lock();
    writeln!(out, "auroc={}", report.auroc)?;
    writeln!(out, "threshold={}", report.best_threshold)?;
    writeln!(out, "accuracy={}", report.threshold_accuracy)?;
    if let Some(path) = &args.scores {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "set,index,score")?;
        for (i, s) in report.id_scores.iter().enumerate() {
            writeln!(w, "id,{i},{s}")?;
        }
        for (i, s) in report.ood_scores.iter().enumerate() {
            writeln!(w, "ood,{i},{s}")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn bandit(args: &BanditArgs) -> vstree::Result<()> {
    let env = match args.env {
        EnvArg::Exploration => Environment::Exploration(ExplorationEnv::evenly_spaced(
            args.arms,
            args.alpha,
            args.beta_env,
            args.delta,
        )?),
        EnvArg::Portfolio => Environment::Portfolio(LinearPortfolioEnv::generate(
            args.dim,
            args.arms,
            args.portfolio_noise,
            args.seed,
        )?),
        EnvArg::Replay => {
            let path = args
                .replay
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("the replay environment needs --replay".into()))?;
            Environment::Replay(ReplayEnv::load(path)?)
        }
    };
    let defaults = AgentConfig::default();
    let agent = AgentConfig {
        kind: match args.agent {
            AgentArg::Vst => AgentKind::Vst,
            AgentArg::Random => AgentKind::Random,
            AgentArg::Oracle => AgentKind::Oracle,
        },
        retrain_every: args.retrain_every,
        warm_start: !args.no_warm_start,
        train: TrainConfig {
            depth: args.depth as usize,
            rank: args.rank,
            learning_rate: args.lr,
            steps: args.steps,
            ..defaults.train
        },
        warm_steps: args.warm_steps,
    };
    let trace = run_bandit(&env, &agent, args.horizon, args.seed)?;
    if let Some(path) = &args.trace {
        let mut w = BufWriter::new(File::create(path)?);
        trace.write_csv(&mut w)?;
        w.flush()?;
        println!("final_cumulative_regret={}", trace.final_regret());
    } else {
        let mut w = BufWriter::new(io::stdout().lock());
        trace.write_csv(&mut w)?;
        w.flush()?;
        eprintln!("final_cumulative_regret={}", trace.final_regret());
    }
    Ok(())
}

fn sample(args: &SampleArgs) -> vstree::Result<()> {
    let model = load_model(&args.model)?.to_model()?;
    let p = model.feature_dim();
    let feature = match args.feature {
        Some(j) if j < p => j,
        Some(j) => return Err(Error::InvalidArgument(format!("--feature {j} out of range for {p} features"))),
        None if p == 1 => 0,
        None => return Err(Error::InvalidArgument(format!("model has {p} features; choose one with --feature"))),
    };
    if args.grid_points < 2 || args.grid_max.partial_cmp(&args.grid_min) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument("grid needs at least 2 points and max > min".into()));
    }
    let stats = model.standardization().clone();
    let grid: Vec<f64> = (0..args.grid_points)
        .map(|i| args.grid_min + (args.grid_max - args.grid_min) * i as f64 / (args.grid_points - 1) as f64)
        .collect();
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .map(|&g| {
            let mut x = stats.feature_mean.clone();
            x[feature] = g;
            x
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let means = with_model!(&model, m => sample_means(m, &refs, args.samples, args.seed))?;
    let mut w = output(args.out.as_deref())?;
    let header: Vec<String> = std::iter::once("x".to_string()).chain((0..args.samples).map(|s| format!("f{s}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (g, m) in grid.iter().zip(&means) {
        let cells: Vec<String> = m.iter().map(|v| stats.inverse_target(*v).to_string()).collect();
        writeln!(w, "{g},{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> vstree::Result<()> {
    let data = synth(args.kind, args.n, args.noise, args.seed)?;
    let mut w = output(args.out.as_deref())?;
    data.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ood(a) => ood(a),
        Command::Bandit(a) => bandit(a),
        Command::Sample(a) => sample(a),
        Command::Synth(a) => synth_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
