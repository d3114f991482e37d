//! `xcal`: command-line front-end for cross-domain calibration and
//! quantization evaluation.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
//! failure. Failures print exactly one machine-parseable line to stderr:
//! `error: <usage|data|numeric>: <message>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xcal_core::bn::{bn_adjust_calibrate, naive_calibrate, CalibrationConfig};
use xcal_core::dataset::{generate_domain, Dataset, DomainSpec, LoadOptions, PatternFamily};
use xcal_core::error::ErrorCategory;
use xcal_core::fakequant::QparamsSet;
use xcal_core::fixture;
use xcal_core::gram::{
    load_gram_bundle, load_gram_summary, mean_gram, multiscale_discrepancy, rank_pool,
    ranking_csv, save_gram_summary,
};
use xcal_core::histogram::DEFAULT_NBINS;
use xcal_core::model_io::{load_model, save_model};
use xcal_core::pipeline::{evaluate, EvalTask, ExecMode};
use xcal_core::Graph;

#[derive(Parser)]
#[command(
    name = "xcal",
    version,
    about = "Cross-domain calibration for post-training quantization"
)]
struct Cli {
    /// Worker threads for kernels (0 = one per core). Thread count never
    /// changes any output byte.
    #[arg(long, global = true, env = "XCAL_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute quantization parameters on a calibration set and write the
    /// folded deployment model plus qparams.json.
    Calibrate(CalibrateArgs),
    /// Evaluate a folded model under simulated integer inference and report
    /// fp32 / quantized / gap metric rows.
    QuantizeEval(QuantizeEvalArgs),
    /// Plain fp32 inference over a dataset, reporting the task metric.
    Infer(InferArgs),
    /// Compute mean Gram matrix summaries of a dataset at one or more taps.
    Gram(GramArgs),
    /// Rank a pool of candidate gram summaries by discrepancy to a source.
    Select(SelectArgs),
    /// Print the discrepancy between two gram summaries (or bundles).
    Discrepancy(DiscrepancyArgs),
    /// Generate a synthetic labeled image domain.
    GenDomain(GenDomainArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Model manifest (model.json) or its directory.
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Quantization bit width.
    #[arg(long)]
    bits: u8,
    /// Re-accumulate BatchNorm statistics on the calibration set before
    /// estimating activation ranges.
    #[arg(long)]
    bn_adjust: bool,
    /// Histogram bins for the clipping-threshold search.
    #[arg(long, default_value_t = DEFAULT_NBINS)]
    nbins: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Read .ppm (binary P6) images instead of .xten tensors.
    #[arg(long)]
    from_ppm: bool,
    /// Output directory for model.json, weights.bin and qparams.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeEvalArgs {
    /// Folded model manifest (as written by `calibrate`) or its directory.
    #[arg(long)]
    model: PathBuf,
    /// qparams.json produced by `calibrate`. Optional with --fp32-only.
    #[arg(long)]
    qparams: Option<PathBuf>,
    /// Evaluation dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    from_ppm: bool,
    /// Skip quantization and report only the fp32 row.
    #[arg(long)]
    fp32_only: bool,
    /// Also write the report CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    from_ppm: bool,
}

#[derive(Args)]
struct TaskArgs {
    /// Evaluation metric: top1, dice or miou.
    #[arg(long, default_value = "top1")]
    task: String,
    /// Class count for miou.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Ground-truth value excluded from miou.
    #[arg(long)]
    ignore_index: Option<i64>,
}

#[derive(Args)]
struct GramArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Tap node id; repeat for a multi-scale bundle.
    #[arg(long, required = true)]
    tap: Vec<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    from_ppm: bool,
    /// Name recorded as the summary's source dataset (default: the data
    /// directory name).
    #[arg(long)]
    source_name: Option<String>,
    /// Output bundle directory (one .xten + .json pair per tap).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Source-domain gram bundle directory.
    #[arg(long)]
    source: PathBuf,
    /// Directory of candidate bundles (one subdirectory per candidate).
    #[arg(long)]
    pool: PathBuf,
    /// Also write the ranking CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiscrepancyArgs {
    /// Gram summary (.xten path) or bundle directory.
    #[arg(long)]
    gram_a: PathBuf,
    #[arg(long)]
    gram_b: PathBuf,
}

#[derive(Args)]
struct GenDomainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Sample count.
    #[arg(long)]
    n: usize,
    /// Canonical fixture domain (a-train, a-eval, a-calib, c-severe,
    /// shift1..shift6); overrides the individual pattern flags.
    #[arg(long)]
    preset: Option<String>,
    /// Pattern family: stripes, blobs or checker.
    #[arg(long, default_value = "stripes")]
    family: String,
    /// Per-channel intensity shift, comma separated.
    #[arg(long, default_value = "0,0,0")]
    shift: String,
    #[arg(long, default_value_t = 1.0)]
    contrast: f32,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Seed; replaces the preset's seed when both are given.
    #[arg(long)]
    seed: Option<u64>,
}

enum CliError {
    Usage(String),
    Core(xcal_core::Error),
}

impl From<xcal_core::Error> for CliError {
    fn from(e: xcal_core::Error) -> Self {
        CliError::Core(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore failure: the pool may already be initialized in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, msg) = match &err {
                CliError::Usage(m) => ("usage", m.clone()),
                CliError::Core(e) => match e.category() {
                    ErrorCategory::Data => ("data", e.to_string()),
                    ErrorCategory::Numeric => ("numeric", e.to_string()),
                },
            };
            eprintln!("error: {kind}: {}", msg.replace('\n', "; "));
            match kind {
                "usage" => ExitCode::from(2),
                "data" => ExitCode::from(3),
                _ => ExitCode::from(4),
            }
        }
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.json")
    } else {
        path.to_path_buf()
    }
}

fn load_dataset_for(
    graph: &Graph,
    data: &Path,
    from_ppm: bool,
) -> Result<Dataset, xcal_core::Error> {
    let mut opts = LoadOptions::for_model(graph);
    opts.from_ppm = from_ppm;
    Dataset::load(data, &opts)
}

fn parse_task(args: &TaskArgs) -> Result<EvalTask, CliError> {
    match args.task.as_str() {
        "top1" => Ok(EvalTask::Top1),
        "dice" => Ok(EvalTask::Dice),
        "miou" => Ok(EvalTask::Miou {
            num_classes: args
                .num_classes
                .ok_or_else(|| usage("--task miou requires --num-classes"))?,
            ignore_index: args.ignore_index,
        }),
        other => Err(usage(format!(
            "unknown task `{other}` (expected top1, dice or miou)"
        ))),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::QuantizeEval(args) => cmd_quantize_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Gram(args) => cmd_gram(args),
        Command::Select(args) => cmd_select(args),
        Command::Discrepancy(args) => cmd_discrepancy(args),
        Command::GenDomain(args) => cmd_gen_domain(args),
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    if !xcal_core::quant::SUPPORTED_BITS.contains(&args.bits) {
        return Err(usage(format!(
            "--bits {} is not supported (choose 4, 6 or 8)",
            args.bits
        )));
    }
    if args.batch_size == 0 || args.nbins == 0 {
        return Err(usage("--batch-size and --nbins must be >= 1"));
    }
    let graph = load_model(&manifest_path(&args.model))?;
    let dataset = load_dataset_for(&graph, &args.data, args.from_ppm)?;
    let batches = dataset.batches(args.batch_size);
    let cfg = CalibrationConfig {
        bits: args.bits,
        nbins: args.nbins,
    };
    let (folded, qparams) = if args.bn_adjust {
        bn_adjust_calibrate(&graph, &batches, &cfg)?
    } else {
        naive_calibrate(&graph, &batches, &cfg)?
    };
    fs::create_dir_all(&args.out).map_err(|e| xcal_core::Error::io(&args.out, e))?;
    save_model(&folded, &args.out.join("model.json"))?;
    qparams.write(&args.out.join("qparams.json"))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report_csv(rows: &[(&str, f32)]) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in rows {
        out.push_str(&format!("{name},{value:.6}\n"));
    }
    out
}

fn cmd_quantize_eval(args: QuantizeEvalArgs) -> Result<(), CliError> {
    let task = parse_task(&args.task)?;
    let graph = load_model(&manifest_path(&args.model))?;
    let dataset = load_dataset_for(&graph, &args.data, args.from_ppm)?;
    let fp32 = evaluate(&graph, ExecMode::Fp32, &dataset, args.batch_size, task)?;

    let rows: Vec<(&str, f32)> = if args.fp32_only {
        vec![("fp32", fp32)]
    } else {
        let qpath = args
            .qparams
            .as_ref()
            .ok_or_else(|| usage("--qparams is required unless --fp32-only is set"))?;
        let qparams = QparamsSet::read(qpath)?;
        let quantized = evaluate(
            &graph,
            ExecMode::FakeQuant(&qparams),
            &dataset,
            args.batch_size,
            task,
        )?;
        vec![
            ("fp32", fp32),
            ("quantized", quantized),
            ("gap", fp32 - quantized),
        ]
    };
    let csv = report_csv(&rows);
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| xcal_core::Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let task = parse_task(&args.task)?;
    let graph = load_model(&manifest_path(&args.model))?;
    let dataset = load_dataset_for(&graph, &args.data, args.from_ppm)?;
    let value = evaluate(&graph, ExecMode::Fp32, &dataset, args.batch_size, task)?;
    print!("{}", report_csv(&[(args.task.task.as_str(), value)]));
    Ok(())
}

fn cmd_gram(args: GramArgs) -> Result<(), CliError> {
    let graph = load_model(&manifest_path(&args.model))?;
    let dataset = load_dataset_for(&graph, &args.data, args.from_ppm)?;
    let batches = dataset.batches(args.batch_size);
    let source_name = args.source_name.clone().unwrap_or_else(|| {
        args.data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".to_string())
    });
    for tap in &args.tap {
        let summary = mean_gram(&graph, tap, &batches)?;
        save_gram_summary(&args.out, &summary, &source_name)?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_select(args: SelectArgs) -> Result<(), CliError> {
    let source = load_gram_bundle(&args.source)?;
    let entries =
        fs::read_dir(&args.pool).map_err(|e| xcal_core::Error::io(&args.pool, e))?;
    let mut pool = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| xcal_core::Error::io(&args.pool, e))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            pool.insert(name, load_gram_bundle(&entry.path())?);
        }
    }
    if pool.is_empty() {
        return Err(CliError::Core(xcal_core::Error::format(
            &args.pool,
            "pool directory contains no candidate bundles".to_string(),
        )));
    }
    let (ranked, skipped) = rank_pool(&source, &pool)?;
    for s in &skipped {
        eprintln!("warning: skipped {}: {}", s.name, s.reason);
    }
    let csv = ranking_csv(&ranked);
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| xcal_core::Error::io(out, e))?;
    }
    Ok(())
}

fn load_gram_arg(path: &Path) -> Result<Vec<xcal_core::gram::GramSummary>, xcal_core::Error> {
    if path.is_dir() {
        load_gram_bundle(path)
    } else {
        load_gram_summary(path).map(|(s, _)| vec![s])
    }
}

fn cmd_discrepancy(args: DiscrepancyArgs) -> Result<(), CliError> {
    let a = load_gram_arg(&args.gram_a)?;
    let b = load_gram_arg(&args.gram_b)?;
    let mut pairs = Vec::new();
    for sa in &a {
        let sb = b.iter().find(|s| s.layer == sa.layer).ok_or_else(|| {
            xcal_core::Error::DimensionMismatch(format!(
                "layer `{}` missing from {}",
                sa.layer,
                args.gram_b.display()
            ))
        })?;
        pairs.push((sa, sb));
    }
    let d = multiscale_discrepancy(&pairs)?;
    println!("{d:.8e}");
    Ok(())
}

fn preset_spec(name: &str) -> Option<DomainSpec> {
    match name {
        "a-train" => Some(fixture::domain_a_train()),
        "a-eval" => Some(fixture::domain_a_eval()),
        "a-calib" => Some(fixture::domain_a_calib()),
        "c-severe" => Some(fixture::domain_c_severe()),
        _ => fixture::domain_ladder()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s),
    }
}

fn cmd_gen_domain(args: GenDomainArgs) -> Result<(), CliError> {
    let mut spec = match &args.preset {
        Some(name) => preset_spec(name)
            .ok_or_else(|| usage(format!("unknown preset `{name}`")))?,
        None => {
            let family = PatternFamily::parse(&args.family)
                .ok_or_else(|| usage(format!("unknown family `{}`", args.family)))?;
            let shift: Vec<f32> = args
                .shift
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|_| usage(format!("bad --shift `{}`", args.shift)))?;
            if shift.is_empty() {
                return Err(usage("--shift needs at least one channel"));
            }
            DomainSpec {
                seed: 0,
                family,
                shift,
                contrast: args.contrast,
                noise: args.noise,
                height: args.height,
                width: args.width,
            }
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let dataset = generate_domain(&spec, args.n, &args.out)?;
    println!("wrote {} samples to {}", dataset.len(), args.out.display());
    Ok(())
}
