use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grcn::io::{load_config_file, write_string, RunConfig};
use grcn::pipeline::{
    metrics_json, run_eval, run_export, run_inspect, run_synth, run_train, LoadedModel, EDGES_FILE, METRICS_FILE,
};
use grcn::synthgen::SynthSpec;
use grcn::{Error, FusionMode, Modality, Partition, Result};

#[derive(Parser)]
#[command(name = "grcn", version, about = "Graph-refined convolutional recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Compute top-K metrics of a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Dump per-edge weights, with an AUC when labels are given.
    InspectEdges(InspectArgs),
    /// Write user and item representations for external plotting.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Spec file (JSON, or TOML by extension).
    #[arg(long)]
    config: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON, or TOML by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with interactions.tsv and feature files.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    /// Comma-separated modality names, e.g. `visual,textual`.
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Edge labels TSV (`user<TAB>item<TAB>true_positive|false_positive`).
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    IdOnly,
    Hard,
    Max,
    Mean,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("--{flag} is required (or set `{flag}` in the config)")))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = load_config_file(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (paths, data) = run_synth(&spec, &args.out)?;
    println!(
        "users {} items {} edges {} false_fraction {:.4}",
        data.graph.num_users(),
        data.graph.num_items(),
        data.graph.num_edges(),
        data.false_fraction()
    );
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut hyper = cfg.hyper;
    match args.variant {
        Some(Variant::Full) => (hyper.fusion, hyper.id_only) = (FusionMode::BaseMax, false),
        Some(Variant::IdOnly) => (hyper.fusion, hyper.id_only) = (FusionMode::BaseMax, true),
        Some(Variant::Hard) => hyper.fusion = FusionMode::Hard,
        Some(Variant::Max) => hyper.fusion = FusionMode::Max,
        Some(Variant::Mean) => hyper.fusion = FusionMode::Mean,
        Some(Variant::Uniform) => hyper.fusion = FusionMode::Uniform,
        None => {}
    }
    if let Some(list) = args.modalities {
        hyper.modalities = list.iter().map(|s| s.parse::<Modality>()).collect::<Result<_>>()?;
    }
    if let Some(k) = args.k {
        hyper.k = k;
    }
    if let Some(n) = args.max_epochs {
        hyper.max_epochs = n;
    }
    let data = required(args.data.or(cfg.data), "data")?;
    let out = required(args.out.or(cfg.out), "out")?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let result = run_train(&data, &hyper, seed, &out)?;
    let r = &result.report;
    println!(
        "epochs {} best_epoch {} best_val_recall {:.6} stopped_early {}",
        r.epochs.len(),
        r.best_epoch,
        r.best_val_recall,
        r.stopped_early
    );
    for p in &result.paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Resolve checkpoint/data/out from flags over config.
fn open_model(args: ModelArgs) -> Result<(LoadedModel, RunConfig, Option<PathBuf>)> {
    let cfg = load_config(args.config.as_deref())?;
    let checkpoint = required(args.checkpoint.or(cfg.checkpoint.clone()), "checkpoint")?;
    let data = required(args.data.or(cfg.data.clone()), "data")?;
    let out = args.out.or(cfg.out.clone());
    Ok((LoadedModel::load(&checkpoint, &data)?, cfg, out))
}

fn eval(args: EvalArgs) -> Result<()> {
    let has_config = args.model.config.is_some();
    let (model, cfg, out) = open_model(args.model)?;
    let k = args.k.unwrap_or(if has_config { cfg.hyper.k } else { 10 });
    let split = match args.split {
        SplitArg::Validation => Partition::Validation,
        SplitArg::Test => Partition::Test,
    };
    let json = metrics_json(&run_eval(&model, split, k)?);
    print!("{json}");
    if let Some(dir) = out {
        write_string(&dir.join(METRICS_FILE), &json)?;
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let (model, cfg, out) = open_model(args.model)?;
    let labels = args.labels.or(cfg.labels);
    let (table, auc) = run_inspect(&model, labels.as_deref())?;
    match out {
        Some(dir) => {
            let path = dir.join(EDGES_FILE);
            write_string(&path, &table)?;
            println!("wrote {}", path.display());
            if let Some(auc) = auc {
                println!("edge_weight_auc {auc}");
            }
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let (model, _, out) = open_model(args.model)?;
    let out = required(out, "out")?;
    for p in run_export(&model, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GRCN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("GRCN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        Error::Io { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectEdges(a) => inspect(a),
        Command::ExportEmbeddings(a) => export(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
