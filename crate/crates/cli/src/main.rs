//! `listwise-ap` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a data error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use listwise_ap::embed::{Embedder, GemPartsEmbedder, LinearEmbedder, MlpEmbedder};
use listwise_ap::exact::{evaluate_retrieval, Protocol, RelevanceJudgment};
use listwise_ap::gradients::{grad_check, random_kink_free_instance};
use listwise_ap::io::{load_descriptors, load_ground_truth, load_labels, save_desc1, save_ground_truth, save_labels, LabelRow};
use listwise_ap::multistage::{CounterReport, Counters, StagePlan};
use listwise_ap::quantized::{Balancing, BinGrid, LossConfig, Variant};
use listwise_ap::retrieval::{alpha_qe_all, cmd_report, fit_whitening, whiten_all, QeConfig, WhiteningModel};
use listwise_ap::training::{
    embed_eval, train, triplet_dry_run, write_history, LossKind, SyntheticConfig, SyntheticDataset, TrainConfig,
    TripletConfig,
};
use listwise_ap::{DescriptorMatrix, Error};

const THREADS_ENV: &str = "LISTWISE_AP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "listwise-ap", version, about = "Listwise AP training, evaluation and retrieval tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an embedder on a synthetic dataset.
    Train(TrainArgs),
    /// Evaluate retrieval mAP under a protocol.
    Eval(EvalArgs),
    /// Fit PCA whitening and optionally apply it.
    Whiten(WhitenArgs),
    /// Alpha-weighted query expansion.
    Qe(QeArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Top-k ranking report with positive/negative tags.
    Report(ReportArgs),
    /// Training budget (forwards/backwards/updates) without running anything.
    Counters(CountersArgs),
}

#[derive(Debug, Args)]
struct RetrievalInputs {
    /// Query descriptors (DESC1).
    #[arg(long)]
    queries: PathBuf,
    /// Database descriptors (DESC1).
    #[arg(long)]
    db: PathBuf,
    /// Ids of the query rows (labels CSV); defaults to the companion
    /// `<queries>.csv`, else row numbers.
    #[arg(long)]
    query_labels: Option<PathBuf>,
    /// Ids of the database rows (labels CSV); defaults to `<db>.csv`.
    #[arg(long)]
    db_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QeFlags {
    /// Neighbors used by query expansion.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    qe_include_self: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: RetrievalInputs,
    /// Ground-truth JSON.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "medium")]
    protocol: Protocol,
    /// Whitening model JSON applied to queries and database first.
    #[arg(long)]
    whiten: Option<PathBuf>,
    /// Expand queries with alpha-QE before ranking.
    #[arg(long)]
    qe: bool,
    #[command(flatten)]
    qe_flags: QeFlags,
    /// Write the evaluation as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WhitenArgs {
    /// Descriptors the whitening is learned from (DESC1).
    #[arg(long)]
    train: PathBuf,
    /// Components kept (default: all).
    #[arg(long)]
    keep: Option<usize>,
    /// Whitening model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Descriptors to whiten with the fitted model.
    #[arg(long, requires = "output")]
    input: Option<PathBuf>,
    /// Destination of the whitened descriptors (DESC1).
    #[arg(long, requires = "input")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QeArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[command(flatten)]
    qe_flags: QeFlags,
    /// Expanded queries (DESC1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "B", default_value_t = 8)]
    b: usize,
    #[arg(long = "C", default_value_t = 4)]
    c: usize,
    #[arg(long = "M", default_value_t = 20)]
    m: usize,
    #[arg(long, default_value = "ap_q")]
    loss: LossKind,
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    balanced: bool,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    inputs: RetrievalInputs,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "medium")]
    protocol: Protocol,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CountersArgs {
    #[arg(long = "B", default_value_t = 4096)]
    b: usize,
    /// Number of updates.
    #[arg(long, default_value_t = 200)]
    iters: u64,
    #[arg(long, default_value = "ap_q")]
    loss: LossKind,
    /// Triplets per update (triplet loss).
    #[arg(long, default_value_t = 64)]
    triplets: usize,
    /// Mining pool size, counted once per refresh (triplet loss).
    #[arg(long, default_value_t = 0)]
    pool: u64,
    #[arg(long, default_value_t = 16)]
    refresh: usize,
    /// Counter report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum DatasetKind {
    Fixture,
    Imbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum EmbedderKind {
    Linear,
    Mlp,
    Gem,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "B")]
    b: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, action = ArgAction::Set)]
    balanced: Option<bool>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Triplets per update (triplet loss).
    #[arg(long)]
    triplets: Option<usize>,
    #[arg(long, value_enum, default_value = "fixture")]
    dataset: DatasetKind,
    /// Seed of the synthetic dataset (default: the training seed).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_enum, default_value = "linear")]
    embedder: EmbedderKind,
    /// Output descriptor dimension.
    #[arg(long = "C", default_value_t = 32)]
    c: usize,
    /// Output directory for history, counters and evaluation artifacts.
    #[arg(long)]
    out: PathBuf,
}

/// Numbers in text outputs: 6 significant digits, '.' decimal.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if magnitude < -4 {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Reads `id` columns from a labels CSV, or the companion `<path>.csv`, or
/// falls back to row numbers.
fn row_ids(explicit: Option<&Path>, desc: &Path, count: usize) -> Result<Vec<String>> {
    let companion = desc.with_extension("csv");
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None if companion.exists() => Some(companion),
        None => None,
    };
    let Some(path) = path else {
        return Ok((0..count).map(|i| i.to_string()).collect());
    };
    let rows = load_labels(&path).with_context(|| format!("reading ids from {}", path.display()))?;
    if rows.len() != count {
        return Err(Error::DimensionMismatch {
            expected: count,
            found: rows.len(),
        })
        .with_context(|| format!("{} does not have one row per descriptor", path.display()));
    }
    Ok(rows.into_iter().map(|r| r.id).collect())
}

struct Loaded {
    queries: DescriptorMatrix,
    query_ids: Vec<String>,
    db: DescriptorMatrix,
    db_ids: Vec<String>,
}

fn load_inputs(inputs: &RetrievalInputs) -> Result<Loaded> {
    let queries = load_descriptors(&inputs.queries).with_context(|| format!("reading {}", inputs.queries.display()))?;
    let db = load_descriptors(&inputs.db).with_context(|| format!("reading {}", inputs.db.display()))?;
    let query_ids = row_ids(inputs.query_labels.as_deref(), &inputs.queries, queries.count())?;
    let db_ids = row_ids(inputs.db_labels.as_deref(), &inputs.db, db.count())?;
    Ok(Loaded {
        queries,
        query_ids,
        db,
        db_ids,
    })
}

fn load_gt(path: &Path) -> Result<Vec<RelevanceJudgment>> {
    load_ground_truth(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn qe_config(f: &QeFlags) -> QeConfig {
    QeConfig {
        k: f.k,
        alpha: f.alpha,
        include_self: f.qe_include_self,
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut data = load_inputs(&args.inputs)?;
    let judgments = load_gt(&args.gt)?;
    if let Some(path) = &args.whiten {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let model: WhiteningModel = serde_json::from_str(&text).map_err(Error::from)?;
        data.queries = whiten_all(&model, &data.queries)?;
        data.db = whiten_all(&model, &data.db)?;
    }
    if args.qe {
        data.queries = alpha_qe_all(&data.queries, &data.db, &qe_config(&args.qe_flags))?;
    }
    let eval = evaluate_retrieval(&data.queries, &data.query_ids, &data.db, &data.db_ids, &judgments, args.protocol)?;
    let mut out = io::stdout().lock();
    writeln!(out, "mAP({})={}", args.protocol, sig6(eval.map))?;
    writeln!(out, "query_id,ap")?;
    for q in &eval.per_query {
        writeln!(out, "{},{}", q.query_id, sig6(q.ap))?;
    }
    for id in &eval.excluded {
        eprintln!("note: query {id} has no {} positives and was excluded", args.protocol);
    }
    if let Some(path) = &args.out {
        write_json(path, &eval)?;
    }
    Ok(())
}

fn cmd_whiten(args: &WhitenArgs) -> Result<()> {
    let train = load_descriptors(&args.train).with_context(|| format!("reading {}", args.train.display()))?;
    let keep = args.keep.unwrap_or(train.dim());
    let model = fit_whitening(&train, keep)?;
    write_json(&args.out, &model)?;
    println!(
        "fitted whitening: {} -> {} dimensions from {} descriptors{}",
        model.input_dim(),
        model.output_dim(),
        train.count(),
        if model.rank_deficient { " (rank deficient)" } else { "" }
    );
    if let (Some(input), Some(output)) = (&args.input, &args.output) {
        let d = load_descriptors(input).with_context(|| format!("reading {}", input.display()))?;
        let w = whiten_all(&model, &d)?;
        save_desc1(output, w.as_matrix()).with_context(|| format!("writing {}", output.display()))?;
        println!("whitened {} descriptors -> {}", w.count(), output.display());
    }
    Ok(())
}

fn cmd_qe(args: &QeArgs) -> Result<()> {
    let q = load_descriptors(&args.queries).with_context(|| format!("reading {}", args.queries.display()))?;
    let db = load_descriptors(&args.db).with_context(|| format!("reading {}", args.db.display()))?;
    let expanded = alpha_qe_all(&q, &db, &qe_config(&args.qe_flags))?;
    save_desc1(&args.out, expanded.as_matrix()).with_context(|| format!("writing {}", args.out.display()))?;
    println!("expanded {} queries -> {}", expanded.count(), args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    use rand::SeedableRng;
    let grid = BinGrid::new(args.m)?;
    let cfg = LossConfig {
        grid,
        variant: match args.loss {
            LossKind::ApQ => Variant::Quantized,
            LossKind::TieAware => Variant::TieAware,
            LossKind::Triplet => {
                return Err(Error::InvalidConfig("gradcheck covers the ap_q and tie_aware losses".into()).into())
            }
        },
        balancing: if args.balanced { Balancing::ClassBalanced } else { Balancing::Uniform },
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let (rows, labels) = random_kink_free_instance(&mut rng, args.b, args.c, &grid, 1000)?;
    let report = grad_check(&rows, &labels, &cfg, args.step, args.tol)?;
    if report.step_out_of_range {
        eprintln!("warning: step {} is outside the recommended range", args.step);
    }
    println!(
        "max_rel_err={} max_abs_err={} checked={} excluded={} tol={} {}",
        sig6(report.max_rel_err),
        sig6(report.max_abs_err),
        report.checked,
        report.excluded,
        args.tol,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_report_run(args: &ReportArgs) -> Result<()> {
    let data = load_inputs(&args.inputs)?;
    let judgments = load_gt(&args.gt)?;
    let report = cmd_report(&data.queries, &data.query_ids, &data.db, &data.db_ids, &judgments, args.protocol, args.k)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_counters(args: &CountersArgs) -> Result<()> {
    let start = Instant::now();
    let counters = match args.loss {
        LossKind::Triplet => {
            let cfg = TripletConfig {
                triplets_per_update: args.triplets,
                refresh_every: args.refresh,
                ..TripletConfig::default()
            };
            cfg.validate()?;
            triplet_dry_run(&cfg, args.iters, args.pool)
        }
        _ => {
            if args.b == 0 {
                return Err(Error::InvalidConfig("--B must be positive".into()).into());
            }
            StagePlan { batch_size: args.b }.dry_run(args.iters)
        }
    };
    print_counters(&counters);
    if let Some(path) = &args.out {
        write_json(path, &counters.report(start.elapsed().as_secs_f64()))?;
    }
    Ok(())
}

fn print_counters(c: &Counters) {
    println!("backwards={} forwards={} updates={}", c.backwards, c.forwards, c.updates);
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.b {
        cfg.batch_size = v;
    }
    if let Some(v) = args.iters {
        cfg.total_iters = v;
    }
    if let Some(v) = args.loss {
        cfg.loss = v;
    }
    if let Some(v) = args.balanced {
        cfg.balanced = v;
    }
    if let Some(v) = args.m {
        cfg.bins = v;
    }
    if let Some(v) = args.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.triplets {
        cfg.triplet.triplets_per_update = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_training<E: Embedder + Sync>(mut model: E, ds: &SyntheticDataset, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let outcome = train(&mut model, ds, cfg)?;
    let mut history = Vec::new();
    write_history(&mut history, &outcome.history)?;
    fs::write(out.join("history.jsonl"), history)?;
    let report: CounterReport = outcome.counters.report(outcome.wall_seconds);
    write_json(&out.join("counters.json"), &report)?;
    write_json(&out.join("config.json"), cfg)?;

    let (q, d) = embed_eval(&model, ds)?;
    save_desc1(out.join("queries.desc"), q.as_matrix())?;
    save_desc1(out.join("db.desc"), d.as_matrix())?;
    let label_rows = |ids: &[String], labels: &[usize]| -> Vec<LabelRow> {
        ids.iter()
            .zip(labels)
            .map(|(id, &c)| LabelRow {
                id: id.clone(),
                class_label: c.to_string(),
            })
            .collect()
    };
    save_labels(out.join("queries.csv"), &label_rows(&ds.queries.ids, &ds.queries.labels))?;
    save_labels(out.join("db.csv"), &label_rows(&ds.db.ids, &ds.db.labels))?;
    save_ground_truth(out.join("gt.json"), &ds.judgments)?;

    println!("initial mAP(medium)={}", sig6(outcome.initial_map));
    println!("mAP(medium)={}", sig6(outcome.final_map));
    print_counters(&outcome.counters);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    use rand::SeedableRng;
    let cfg = train_config(args)?;
    let data_seed = args.data_seed.unwrap_or(cfg.seed);
    let synth = match args.dataset {
        DatasetKind::Fixture => SyntheticConfig::fixture(data_seed),
        DatasetKind::Imbalanced => SyntheticConfig::imbalanced_fixture(data_seed),
    };
    let ds = SyntheticDataset::generate(&synth)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000));
    let f = ds.feature_dim();
    match args.embedder {
        EmbedderKind::Linear => run_training(LinearEmbedder::random(f, args.c, &mut rng), &ds, &cfg, &args.out),
        EmbedderKind::Mlp => run_training(MlpEmbedder::random(f, 2 * args.c, args.c, &mut rng), &ds, &cfg, &args.out),
        EmbedderKind::Gem => run_training(GemPartsEmbedder::random(f, 4, args.c, &mut rng)?, &ds, &cfg, &args.out),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a nonnegative integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Usage errors are bad flag values; everything else is a data error.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::UnknownProtocol(_) | Error::InvalidBinCount(_) | Error::BatchTooSmall { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Whiten(a) => cmd_whiten(a),
        Command::Qe(a) => cmd_qe(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report_run(a),
        Command::Counters(a) => cmd_counters(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
