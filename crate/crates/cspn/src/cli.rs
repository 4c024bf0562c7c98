//! Command-line surface. Every command writes its resolved configuration
//! and machine-readable CSV outputs into `--out`, and a human summary to
//! standard output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cspn_core::abcspn::{self, AbcspnModel, BlockGrid, ImageSet, PixelMode};
use cspn_core::circuit::Circuit;
use cspn_core::citest::{self, NullChoice, RcotConfig};
use cspn_core::data::synthetic::{make_synthetic, Generator, SyntheticSpec};
use cspn_core::data::{Dataset, EvidenceMask};
use cspn_core::learn::{self, ClusterMethod, LearnParams};
use cspn_core::leaves::FitControl;
use cspn_core::optimize::{self, OptControl};
use cspn_core::rng;
use rayon::prelude::*;

use crate::abcspn_io;
use crate::config::Resolver;
use crate::error::CliError;
use crate::images;
use crate::model_io;
use crate::parallel;
use crate::tabular;

#[derive(Debug, Parser)]
#[command(name = "cspn", version, about = "Conditional sum-product networks: learn, train, evaluate and sample")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file of key = value options; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a circuit structure and parameters from data.
    Learn(LearnCmd),
    /// Refine all parameters of a model end to end.
    Train(TrainCmd),
    /// Mean conditional log-likelihood and RMSE of a model on data.
    Eval(EvalCmd),
    /// Draw targets given each evidence row.
    Sample(SampleCmd),
    /// Most probable explanation for each evidence row.
    Mpe(MpeCmd),
    /// Pairwise conditional independence tests between targets.
    Citest(CitestCmd),
    /// Learn a block-wise autoregressive image model.
    #[command(name = "abcspn-train")]
    AbcspnTrain(AbcspnTrainCmd),
    /// Log-likelihood of labelled images.
    #[command(name = "abcspn-eval")]
    AbcspnEval(AbcspnEvalCmd),
    /// Sample images conditioned on a class or a class mixture.
    #[command(name = "abcspn-sample")]
    AbcspnSample(AbcspnSampleCmd),
}

/// Where the `(y, x)` rows come from: a CSV with schema, a 0/1 benchmark
/// file with an evidence fraction, or a synthetic generator.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Fraction of benchmark columns used as evidence.
    #[arg(long)]
    pub evidence: Option<f64>,
    /// Seed of the evidence permutation (defaults to --seed).
    #[arg(long)]
    pub mask_seed: Option<u64>,
    /// One of ci_pair, dependent_pair, two_blob_gating, poisson_glm, block_factorized.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub rows: Option<usize>,
    /// Seed of the synthetic generator (defaults to --seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct LearnOpts {
    /// Minimum rows for a split; smaller slices become fully factorized.
    #[arg(long)]
    pub min_instances: Option<usize>,
    /// Significance level of the independence tests.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    /// kmeans or random_split.
    #[arg(long)]
    pub cluster_method: Option<String>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub min_frac: Option<f64>,
    #[arg(long)]
    pub gate_ridge: Option<f64>,
    /// L2 penalty of the leaf GLM fits.
    #[arg(long)]
    pub leaf_ridge: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOpts {
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// After model selection, retrain on train + validation for the best epoch count.
    #[arg(long)]
    pub refit_union: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Precision {
    /// Six decimals.
    #[default]
    Short,
    /// 17 significant digits.
    Full,
}

#[derive(Debug, Args)]
pub struct LearnCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub learn: LearnOpts,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Validation rows in the same format as --data or --benchmark.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Use the trailing fraction of the data as validation when --valid is absent.
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct SampleCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Draws per evidence row, or in total for models without evidence.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MpeCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct CitestCmd {
    #[command(flatten)]
    pub data: DataArgs,
    /// Test one pair of target positions, `i,j`.
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// auto, lpb, hbe or permutation.
    #[arg(long)]
    pub null: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct ImageArgs {
    /// IDX image file (n x height x width bytes, optionally gzipped).
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Threshold pixels at 0.5 and use Bernoulli leaves.
    #[arg(long)]
    pub binarize: bool,
    /// Use only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AbcspnTrainCmd {
    #[command(flatten)]
    pub images: ImageArgs,
    /// Blocks per column and row, `RxC`.
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub learn: LearnOpts,
}

#[derive(Debug, Args)]
pub struct AbcspnEvalCmd {
    /// Model directory.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub images: ImageArgs,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct AbcspnSampleCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub class: Option<usize>,
    /// Class weights, comma-separated, summing to one.
    #[arg(long)]
    pub mix: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
}

/// Common settings after resolution.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
}

fn fmt_real(v: f64, p: Precision) -> String {
    match p {
        Precision::Short => format!("{v:.6}"),
        Precision::Full => model_io::real(v),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn resolve_data(r: &mut Resolver, args: &DataArgs, seed: u64) -> Result<Dataset, CliError> {
    let data = r.opt("data", args.data.as_ref().map(|p| p.display().to_string()))?;
    let schema = r.opt("schema", args.schema.as_ref().map(|p| p.display().to_string()))?;
    let benchmark = r.opt("benchmark", args.benchmark.as_ref().map(|p| p.display().to_string()))?;
    let synthetic = r.opt("synthetic", args.synthetic.clone())?;
    let sources = [data.is_some(), benchmark.is_some(), synthetic.is_some()].iter().filter(|&&b| b).count();
    if sources != 1 {
        return Err(CliError::validation("give exactly one of --data (with --schema), --benchmark or --synthetic"));
    }
    if let Some(data) = data {
        let schema = schema.ok_or_else(|| CliError::validation("--data needs --schema"))?;
        return Ok(tabular::load_csv(Path::new(&data), Path::new(&schema))?);
    }
    if let Some(bench) = benchmark {
        let fraction = r.get("evidence", args.evidence, 0.5)?;
        let mask_seed = r.get("mask_seed", args.mask_seed, seed)?;
        return Ok(tabular::load_benchmark_masked(Path::new(&bench), &EvidenceMask::Fraction { fraction, seed: mask_seed })?);
    }
    let name = synthetic.expect("one source");
    let rows = r.get("rows", args.rows, 1000usize)?;
    let data_seed = r.get("data_seed", args.data_seed, seed)?;
    let generator = Generator::parse(&name)?;
    Ok(make_synthetic(&SyntheticSpec { generator, n: rows }, data_seed)?)
}

/// Loads data in the same format as `args`, but from `path`.
fn resolve_companion(r: &mut Resolver, args: &DataArgs, path: &Path, seed: u64) -> Result<Dataset, CliError> {
    let mut other = DataArgs { data: None, benchmark: None, synthetic: None, ..args.clone() };
    let mut scratch = Resolver::default();
    if args.benchmark.is_some() {
        other.benchmark = Some(path.to_path_buf());
    } else {
        other.data = Some(path.to_path_buf());
    }
    let d = resolve_data(&mut scratch, &other, seed)?;
    r.note("valid", &path.display().to_string());
    Ok(d)
}

pub fn resolve_learn_params(r: &mut Resolver, o: &LearnOpts, seed: u64) -> Result<LearnParams, CliError> {
    let d = LearnParams::default();
    let method = r.get("cluster_method", o.cluster_method.clone(), d.cluster_method.name().to_string())?;
    let params = LearnParams {
        min_instances: r.get("min_instances", o.min_instances, d.min_instances)?,
        alpha: r.get("alpha", o.alpha, d.alpha)?,
        clusters: r.get("clusters", o.clusters, d.clusters)?,
        cluster_method: ClusterMethod::parse(&method).ok_or_else(|| CliError::validation(format!("unknown cluster method '{method}'")))?,
        seed,
        min_frac: r.opt("min_frac", o.min_frac)?,
        max_depth: r.opt("max_depth", o.max_depth)?,
        gate_ridge: r.get("gate_ridge", o.gate_ridge, d.gate_ridge)?,
        leaf_fit: FitControl { ridge: r.get("leaf_ridge", o.leaf_ridge, d.leaf_fit.ridge)?, ..d.leaf_fit },
        ..d
    };
    params.validate()?;
    Ok(params)
}

fn resolve_train_ctrl(r: &mut Resolver, o: &TrainOpts, seed: u64) -> Result<(OptControl, bool), CliError> {
    let d = OptControl::default();
    let ctrl = OptControl {
        step: r.get("step", o.step, d.step)?,
        batch: r.get("batch", o.batch, d.batch)?,
        epochs: r.get("epochs", o.epochs, d.epochs)?,
        patience: r.get("patience", o.patience, d.patience)?,
        seed,
        ..d
    };
    ctrl.validate()?;
    let refit = r.get("refit_union", o.refit_union.then_some(true), false)?;
    Ok((ctrl, refit))
}

fn check_model_data(c: &Circuit, d: &Dataset) -> Result<(), CliError> {
    if c.num_y() != d.num_y() || c.num_x() != d.num_x() {
        return Err(CliError::validation(format!(
            "model has {} targets and {} features, data has {} and {}",
            c.num_y(),
            c.num_x(),
            d.num_y(),
            d.num_x()
        )));
    }
    Ok(())
}

fn header(prefix: &str, n: usize) -> String {
    (0..n).map(|j| format!("{prefix}{j}")).collect::<Vec<_>>().join(",")
}

fn row_text(vs: &[f64]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses and runs a command line; returns the summary printed to stdout.
pub fn run_from<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::validation(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    let mut r = Resolver::from_file(cli.config.as_deref())?;
    let seed = r.get("seed", cli.seed, 0u64)?;
    let threads = r.get("threads", cli.threads, 1usize)?;
    let out: String = r.get("out", cli.out.as_ref().map(|p| p.display().to_string()), "out".to_string())?;
    let ctx = RunContext { seed, threads: threads.max(1), out: PathBuf::from(out) };
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::io(format!("{}: {e}", ctx.out.display())))?;
    let command = cli.command;
    let summary = parallel::with_threads(ctx.threads, || dispatch(&mut r, &ctx, &command))
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))??;
    Ok(summary)
}

fn dispatch(r: &mut Resolver, ctx: &RunContext, command: &Command) -> Result<String, CliError> {
    let name = match command {
        Command::Learn(_) => "learn",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Sample(_) => "sample",
        Command::Mpe(_) => "mpe",
        Command::Citest(_) => "citest",
        Command::AbcspnTrain(_) => "abcspn-train",
        Command::AbcspnEval(_) => "abcspn-eval",
        Command::AbcspnSample(_) => "abcspn-sample",
    };
    r.note("command", &name);
    let summary = match command {
        Command::Learn(c) => cmd_learn(r, ctx, c),
        Command::Train(c) => cmd_train(r, ctx, c),
        Command::Eval(c) => cmd_eval(r, ctx, c),
        Command::Sample(c) => cmd_sample(r, ctx, c),
        Command::Mpe(c) => cmd_mpe(r, ctx, c),
        Command::Citest(c) => cmd_citest(r, ctx, c),
        Command::AbcspnTrain(c) => cmd_abcspn_train(r, ctx, c),
        Command::AbcspnEval(c) => cmd_abcspn_eval(r, ctx, c),
        Command::AbcspnSample(c) => cmd_abcspn_sample(r, ctx, c),
    }?;
    r.check_unused()?;
    r.write(&ctx.out)?;
    Ok(summary)
}

fn cmd_learn(r: &mut Resolver, ctx: &RunContext, c: &LearnCmd) -> Result<String, CliError> {
    let data = resolve_data(r, &c.data, ctx.seed)?;
    let params = resolve_learn_params(r, &c.learn, ctx.seed)?;
    let learned = learn::learn_cspn_with(&data, &params, parallel::executor(ctx.threads))?;
    let summary = learned.circuit.summary();
    model_io::save_model(&learned.circuit, &ctx.out.join("model.json"))?;
    let text = format!("{summary}\n");
    write_file(&ctx.out.join("structure.txt"), &text)?;
    let s = &learned.stats;
    let stats = format!(
        "key,value\nci_tests,{}\nproduct_splits,{}\ngating_splits,{}\nfactorized,{}\nforced_splits,{}\ntarget_clusterings,{}\nleaves,{}\nmax_depth,{}\n",
        s.ci_tests, s.product_splits, s.gating_splits, s.factorized, s.forced_splits, s.target_clusterings, s.leaves, s.max_depth_reached
    );
    write_file(&ctx.out.join("learn_stats.csv"), &stats)?;
    Ok(format!("learned from {} rows ({} targets, {} features)\n{text}", data.n_rows(), data.num_y(), data.num_x()))
}

fn cmd_train(r: &mut Resolver, ctx: &RunContext, c: &TrainCmd) -> Result<String, CliError> {
    r.note("model", &c.model.display().to_string());
    let model = model_io::load_model(&c.model)?;
    let mut train = resolve_data(r, &c.data, ctx.seed)?;
    let valid = match &c.valid {
        Some(p) => resolve_companion(r, &c.data, p, ctx.seed)?,
        None => {
            let frac = r.get("valid_fraction", c.valid_fraction, 0.0)?;
            if !(0.0..1.0).contains(&frac) {
                return Err(CliError::validation(format!("valid fraction {frac} outside [0, 1)")));
            }
            let cut = train.n_rows() - (frac * train.n_rows() as f64).round() as usize;
            let (a, b) = train.split_at(cut);
            train = a;
            b
        }
    };
    check_model_data(&model, &train)?;
    let (ctrl, refit) = resolve_train_ctrl(r, &c.train, ctx.seed)?;
    let origin = Instant::now();
    let (mut trained, log) = optimize::train_with_clock(&model, &train, &valid, &ctrl, &mut || origin.elapsed().as_secs_f64())?;
    if refit && valid.n_rows() > 0 {
        trained = optimize::refit_on_union(&model, &train, &valid, log.best_epoch, &ctrl)?;
    }
    model_io::save_model(&trained, &ctx.out.join("model.json"))?;
    let mut csv = String::from("epoch,train_cll,valid_cll,grad_norm,seconds\n");
    let _ = writeln!(csv, "0,{},{},,", log.initial_train_cll, log.initial_valid_cll);
    for e in &log.epochs {
        let _ = writeln!(csv, "{},{},{},{},{}", e.epoch, e.train_cll, e.valid_cll, e.grad_norm, e.seconds);
    }
    write_file(&ctx.out.join("train_log.csv"), &csv)?;
    Ok(format!(
        "trained {} epochs (best {}{}): valid CLL {:.6} -> {:.6}\n",
        log.epochs.len(),
        log.best_epoch,
        if log.stopped_early { ", stopped early" } else { "" },
        log.initial_valid_cll,
        log.best_valid_cll
    ))
}

/// Mean CLL, RMSE of the expected-value prediction, and per-row CLLs.
pub fn eval_metrics(model: &Circuit, data: &Dataset) -> Result<(f64, f64, Vec<f64>), CliError> {
    check_model_data(model, data)?;
    let mut cll = Vec::with_capacity(data.n_rows());
    let mut sq = 0.0;
    for row in 0..data.n_rows() {
        let (y, x) = (data.y_row(row), data.x_row(row));
        cll.push(model.log_density_of(y, x)?);
        let pred = model.expected_value(x)?;
        sq += pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    }
    let n = data.n_rows().max(1) as f64;
    let mean = cll.iter().sum::<f64>() / n;
    let rmse = (sq / (n * data.num_y() as f64)).sqrt();
    Ok((mean, rmse, cll))
}

fn cmd_eval(r: &mut Resolver, ctx: &RunContext, c: &EvalCmd) -> Result<String, CliError> {
    r.note("model", &c.model.display().to_string());
    let model = model_io::load_model(&c.model)?;
    let data = resolve_data(r, &c.data, ctx.seed)?;
    let precision = r.get("precision", c.precision.map(|p| format!("{p:?}").to_lowercase()), "short".to_string())?;
    let precision = Precision::from_str(&precision, true).map_err(CliError::validation)?;
    let (mean, rmse, per_row) = eval_metrics(&model, &data)?;
    let metrics = format!("n,mean_cll,rmse\n{},{},{}\n", data.n_rows(), fmt_real(mean, precision), fmt_real(rmse, precision));
    write_file(&ctx.out.join("metrics.csv"), &metrics)?;
    let mut rows = String::from("row,cll\n");
    for (i, v) in per_row.iter().enumerate() {
        let _ = writeln!(rows, "{i},{}", fmt_real(*v, precision));
    }
    write_file(&ctx.out.join("per_sample_cll.csv"), &rows)?;
    Ok(format!("n = {}\nmean CLL = {}\nRMSE = {}\n", data.n_rows(), fmt_real(mean, precision), fmt_real(rmse, precision)))
}

/// Feature rows to condition on; a feature-free model gets one empty row.
fn evidence_rows(model: &Circuit, data: Option<&Dataset>) -> Result<Vec<Vec<f64>>, CliError> {
    match data {
        Some(d) => {
            if d.num_x() != model.num_x() {
                return Err(CliError::validation(format!("model expects {} features, data has {}", model.num_x(), d.num_x())));
            }
            Ok((0..d.n_rows()).map(|r| d.x_row(r).to_vec()).collect())
        }
        None if model.num_x() == 0 => Ok(vec![Vec::new()]),
        None => Err(CliError::validation("the model has features; give evidence rows with a data source")),
    }
}

fn has_source(d: &DataArgs) -> bool {
    d.data.is_some() || d.benchmark.is_some() || d.synthetic.is_some()
}

fn cmd_sample(r: &mut Resolver, ctx: &RunContext, c: &SampleCmd) -> Result<String, CliError> {
    r.note("model", &c.model.display().to_string());
    let model = model_io::load_model(&c.model)?;
    let data = if has_source(&c.data) { Some(resolve_data(r, &c.data, ctx.seed)?) } else { None };
    let count = r.get("count", c.count, 1usize)?;
    let xs = evidence_rows(&model, data.as_ref())?;
    let mut rng = rng::seeded(ctx.seed);
    let mut csv = format!("row,draw,{}\n", header("y", model.num_y()));
    for (i, x) in xs.iter().enumerate() {
        for d in 0..count {
            let y = model.sample(x, &mut rng)?;
            let _ = writeln!(csv, "{i},{d},{}", row_text(&y));
        }
    }
    write_file(&ctx.out.join("samples.csv"), &csv)?;
    Ok(format!("{} samples for {} evidence rows\n", xs.len() * count, xs.len()))
}

fn cmd_mpe(r: &mut Resolver, ctx: &RunContext, c: &MpeCmd) -> Result<String, CliError> {
    r.note("model", &c.model.display().to_string());
    let model = model_io::load_model(&c.model)?;
    let data = resolve_data(r, &c.data, ctx.seed)?;
    let xs = evidence_rows(&model, Some(&data))?;
    let mut csv = format!("row,{}\n", header("y", model.num_y()));
    let mut hits = 0usize;
    for (i, x) in xs.iter().enumerate() {
        let y = model.mpe(x)?;
        if data.num_y() == model.num_y() && y.as_slice() == data.y_row(i) {
            hits += 1;
        }
        let _ = writeln!(csv, "{i},{}", row_text(&y));
    }
    write_file(&ctx.out.join("mpe.csv"), &csv)?;
    Ok(format!("MPE for {} rows; exact match on {hits}\n", xs.len()))
}

fn cmd_citest(r: &mut Resolver, ctx: &RunContext, c: &CitestCmd) -> Result<String, CliError> {
    let data = resolve_data(r, &c.data, ctx.seed)?;
    let alpha = r.get("alpha", c.alpha, 0.05)?;
    let null = r.get("null", c.null.clone(), "auto".to_string())?;
    let null = match null.as_str() {
        "auto" => NullChoice::Auto,
        "lpb" => NullChoice::Lpb,
        "hbe" => NullChoice::Hbe,
        "permutation" => NullChoice::Permutation,
        other => return Err(CliError::validation(format!("unknown null approximation '{other}'"))),
    };
    let cfg = RcotConfig { null, ..RcotConfig::default() };
    let mut csv = String::from("i,j,statistic,p_value,method,dependent\n");
    let mut line = |i: usize, j: usize, t: &citest::CiTestResult| {
        let _ = writeln!(csv, "{i},{j},{},{},{},{}", t.statistic, t.p_value, t.method, t.dependent(alpha));
    };
    let summary = if let Some(pair) = r.opt("pair", c.pair.clone())? {
        let (i, j) = pair
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| CliError::validation(format!("--pair expects i,j, got '{pair}'")))?;
        if i == j || i >= data.num_y() || j >= data.num_y() {
            return Err(CliError::validation(format!("pair ({i}, {j}) invalid for {} targets", data.num_y())));
        }
        let t = citest::pair_test(&data, i, j, ctx.seed, &cfg)?;
        line(i, j, &t);
        format!("({i}, {j}): statistic {:.6}, p = {:.6} [{}], {}\n", t.statistic, t.p_value, t.method, if t.dependent(alpha) { "dependent" } else { "independent" })
    } else {
        let pairs = citest::target_pairs(data.num_y());
        let job = |k: usize| {
            let (i, j) = pairs[k];
            citest::pair_test(&data, i, j, ctx.seed, &cfg)
        };
        let results = parallel::executor(ctx.threads).run(pairs.len(), &job);
        let mut tests = Vec::with_capacity(pairs.len());
        for (&(i, j), t) in pairs.iter().zip(results) {
            let t = t?;
            line(i, j, &t);
            tests.push(((i, j), t));
        }
        let graph = citest::graph_from_tests(data.num_y(), tests, alpha);
        format!("{} tests, {} dependent pairs; blocks {:?}\n", pairs.len(), graph.edges.len(), graph.components())
    };
    write_file(&ctx.out.join("citest.csv"), &csv)?;
    Ok(summary)
}

fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    s.split_once(['x', 'X'])
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| CliError::validation(format!("grid must look like 2x2, got '{s}'")))
}

fn resolve_images(r: &mut Resolver, a: &ImageArgs) -> Result<(ImageSet, PixelMode), CliError> {
    r.note("images", &a.images.display().to_string());
    r.note("labels", &a.labels.display().to_string());
    let classes = r.opt("classes", a.classes)?;
    let binarize = r.get("binarize", a.binarize.then_some(true), false)?;
    let limit = r.opt("limit", a.limit)?;
    let mut set = images::load_idx_images(&a.images, &a.labels, classes)?;
    if let Some(n) = limit {
        set = set.select(&(0..n.min(set.len())).collect::<Vec<_>>());
    }
    if binarize {
        Ok((set.binarized(), PixelMode::Bernoulli))
    } else {
        Ok((set, PixelMode::Gaussian))
    }
}

fn cmd_abcspn_train(r: &mut Resolver, ctx: &RunContext, c: &AbcspnTrainCmd) -> Result<String, CliError> {
    let (set, mode) = resolve_images(r, &c.images)?;
    let grid_s = r.get("grid", c.grid.clone(), "2x2".to_string())?;
    let (gr, gc) = parse_grid(&grid_s)?;
    let grid = BlockGrid::new(set.height, set.width, gr, gc)?;
    let params = resolve_learn_params(r, &c.learn, ctx.seed)?;
    let trained = if ctx.threads > 1 {
        let learned = (0..grid.num_blocks())
            .into_par_iter()
            .map(|i| abcspn::train_block(&set, &grid, mode, &params, i, &parallel::RayonPairs))
            .collect::<Result<Vec<_>, _>>()?;
        abcspn::assemble(&set, &grid, learned)?
    } else {
        abcspn::abcspn_train(&set, &grid, mode, &params)?
    };
    let dir = ctx.out.join("model");
    abcspn_io::save_abcspn(&trained.model, &dir)?;
    let mut csv = String::from("block,pixels,features,ci_tests,first_split_tests,leaves,gating_splits,product_splits\n");
    for (i, (s, circuit)) in trained.block_stats.iter().zip(trained.model.blocks()).enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{}",
            circuit.num_y(),
            circuit.num_x(),
            s.ci_tests,
            s.tests_per_split.first().copied().unwrap_or(0),
            s.leaves,
            s.gating_splits,
            s.product_splits
        );
    }
    write_file(&ctx.out.join("block_stats.csv"), &csv)?;
    let mean = abcspn::mean_log_likelihood(&trained.model, &set)?;
    Ok(format!(
        "{} blocks on {} images ({}x{}, {} classes); train mean log-likelihood {mean:.6}\nmodel written to {}\n",
        grid.num_blocks(),
        set.len(),
        set.height,
        set.width,
        set.num_classes,
        dir.display()
    ))
}

fn cmd_abcspn_eval(r: &mut Resolver, ctx: &RunContext, c: &AbcspnEvalCmd) -> Result<String, CliError> {
    r.note("model", &c.model.display().to_string());
    let model = abcspn_io::load_abcspn(&c.model)?;
    let (set, _) = resolve_images(r, &c.images)?;
    let precision = r.get("precision", c.precision.map(|p| format!("{p:?}").to_lowercase()), "short".to_string())?;
    let precision = Precision::from_str(&precision, true).map_err(CliError::validation)?;
    let mut rows = String::from("image,class,log_likelihood\n");
    let mut total = 0.0;
    for i in 0..set.len() {
        let ll = model.log_likelihood(set.image(i), set.labels[i])?;
        total += ll;
        let _ = writeln!(rows, "{i},{},{}", set.labels[i], fmt_real(ll, precision));
    }
    let mean = total / set.len().max(1) as f64;
    write_file(&ctx.out.join("per_image_ll.csv"), &rows)?;
    write_file(&ctx.out.join("metrics.csv"), &format!("n,mean_log_likelihood\n{},{}\n", set.len(), fmt_real(mean, precision)))?;
    Ok(format!("n = {}\nmean log-likelihood = {}\n", set.len(), fmt_real(mean, precision)))
}

fn class_weights(model: &AbcspnModel, class: Option<usize>, mix: Option<&str>) -> Result<Vec<f64>, CliError> {
    match (class, mix) {
        (Some(_), Some(_)) => Err(CliError::validation("give --class or --mix, not both")),
        (Some(c), None) => {
            if c >= model.num_classes() {
                return Err(CliError::validation(format!("class {c} out of range for {} classes", model.num_classes())));
            }
            Ok(abcspn::one_hot(c, model.num_classes()))
        }
        (None, Some(m)) => m
            .split(',')
            .map(|w| w.trim().parse::<f64>().map_err(|_| CliError::validation(format!("bad mixture weight '{w}'"))))
            .collect(),
        (None, None) => Ok(model.class_prior().to_vec()),
    }
}

fn cmd_abcspn_sample(r: &mut Resolver, ctx: &RunContext, c: &AbcspnSampleCmd) -> Result<String, CliError> {
    r.note("model", &c.model.display().to_string());
    let model = abcspn_io::load_abcspn(&c.model)?;
    let class = r.opt("class", c.class)?;
    let mix = r.opt("mix", c.mix.clone())?;
    let count = r.get("count", c.count, 1usize)?;
    let weights = class_weights(&model, class, mix.as_deref())?;
    let mut rng = rng::seeded(ctx.seed);
    let g = model.grid();
    let mut csv = format!("sample,mean_intensity,{}\n", header("p", g.num_pixels()));
    for i in 0..count {
        let img = model.sample(&weights, &mut rng)?;
        images::write_pgm(&ctx.out.join(format!("sample_{i:04}.pgm")), g.width(), g.height(), &img)?;
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        let _ = writeln!(csv, "{i},{mean},{}", row_text(&img));
    }
    write_file(&ctx.out.join("samples.csv"), &csv)?;
    Ok(format!("{count} samples with class weights {weights:?}\n"))
}
