use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use softlabel::adapter::{Optimizer, TargetKind, TrainConfig};
use softlabel::pipeline::{self, Binning, PipelineConfig, PipelineError, PipelineInputs, RunSpec};
use softlabel::synth::SyntheticWorld;

#[derive(Parser)]
#[command(name = "softlabel", version, about = "Soft-label adapter training and evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: collection, split, base and expert matrices.
    Synth(SynthArgs),
    /// Build positive and negative pairs from a collection and split.
    Pairgen(PairgenArgs),
    /// Score pairs with expert matrices and attach soft labels.
    Label(LabelArgs),
    /// Train a linear adapter over base embeddings.
    Train(TrainArgs),
    /// Score TREC or JSONL runs against qrels.
    EvalRetrieval(EvalRetrievalArgs),
    /// Held-out intra/inter-group retrieval metrics and PR curves.
    EvalHeldout(EvalHeldoutArgs),
    /// Similarity-distribution histograms and pairwise symmetric KL.
    EvalDist(EvalDistArgs),
    /// Run every stage end to end.
    Pipeline(Box<PipelineArgs>),
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long)]
    groups: Option<usize>,
    /// Train questions per group.
    #[arg(long)]
    train_questions: Option<usize>,
    /// Held-out questions per group.
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Number of expert views.
    #[arg(long)]
    experts_count: Option<usize>,
    #[arg(long)]
    expert_noise: Option<f64>,
    #[arg(long)]
    base_noise: Option<f64>,
}

impl WorldArgs {
    fn apply(&self, world: &mut SyntheticWorld) {
        set(&mut world.groups, self.groups);
        set(&mut world.train, self.train_questions);
        set(&mut world.heldout, self.heldout);
        set(&mut world.dim, self.dim);
        set(&mut world.experts, self.experts_count);
        set(&mut world.expert_noise, self.expert_noise);
        set(&mut world.base_noise, self.base_noise);
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairgenArgs {
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the collection including concatenated texts.
    #[arg(long)]
    collection_out: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Comma-separated expert matrix files.
    #[arg(long, value_delimiter = ',', required = true)]
    experts: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    init_noise: Option<f64>,
    #[arg(long)]
    output_dim: Option<usize>,
    /// Skip L2 normalization of adapter outputs.
    #[arg(long)]
    no_normalize: bool,
}

impl TrainFlags {
    fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        set(&mut config.learning_rate, self.lr);
        set(&mut config.batch_size, self.batch);
        set(&mut config.epochs, self.epochs);
        set(&mut config.init_noise, self.init_noise);
        if let Some(name) = &self.optimizer {
            config.optimizer = name.parse::<Optimizer>().map_err(|e| anyhow!(e))?;
        }
        if self.output_dim.is_some() {
            config.output_dim = self.output_dim;
        }
        if self.no_normalize {
            config.normalize_output = false;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// hard, soft1, soft2 or soft3.
    #[arg(long)]
    target: String,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRetrievalArgs {
    /// `<dataset>=<path>` or a bare path for dataset `default`.
    #[arg(long, required = true)]
    qrels: Vec<String>,
    /// `<model>:<dataset>=<path>`, `<model>=<path>` or a bare path.
    #[arg(long, required = true)]
    run: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalHeldoutArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// `<name>=<adapter.bin>`; repeatable.
    #[arg(long)]
    adapter: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalDistArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// `<name>=<adapter.bin>`; repeatable.
    #[arg(long)]
    adapter: Vec<String>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// key = value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use existing inputs instead of a synthetic world.
    #[arg(long)]
    collection: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    experts: Vec<PathBuf>,
    #[command(flatten)]
    world: WorldArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Comma-separated subset of hard,soft1,soft2,soft3.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
}

/// Contents of a pipeline config file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    collection: Option<PathBuf>,
    split: Option<PathBuf>,
    base: Option<PathBuf>,
    experts: Option<Vec<PathBuf>>,
    world: Option<SyntheticWorld>,
    lr: Option<f64>,
    batch: Option<usize>,
    epochs: Option<usize>,
    optimizer: Option<String>,
    init_noise: Option<f64>,
    targets: Option<Vec<String>>,
    k: Option<usize>,
    bins: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Splits `name=path`; a bare path gets `default` as its name.
fn named_path(spec: &str, default: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) => (name.to_owned(), PathBuf::from(path)),
        None => (default.to_owned(), PathBuf::from(spec)),
    }
}

fn parse_targets(names: &[String]) -> Result<Vec<TargetKind>> {
    names.iter().map(|n| n.parse::<TargetKind>().map_err(|e| anyhow!(e))).collect()
}

fn usage(message: String) -> anyhow::Error {
    PipelineError::Config(message).into()
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut world = SyntheticWorld { seed: args.seed, ..SyntheticWorld::default() };
    args.world.apply(&mut world);
    let paths = pipeline::run_synth(&world, &args.out)?;
    eprintln!("synth: wrote {} expert matrices to {}", paths.experts.len(), args.out.display());
    Ok(())
}

fn run_pairgen(args: PairgenArgs) -> Result<()> {
    let pairs =
        pipeline::run_pairgen(&args.collection, &args.split, args.seed, &args.out, args.collection_out.as_deref())?;
    eprintln!("pairgen: {} records -> {}", pairs.len(), args.out.display());
    Ok(())
}

fn run_label(args: LabelArgs) -> Result<()> {
    let (records, active) = pipeline::run_label(&args.pairs, &args.experts, &args.out)?;
    eprintln!("label: {} records -> {}", records.len(), args.out.display());
    for (expert, fraction) in active {
        println!("{expert}\t{fraction:.4}");
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let target_kind = args.target.parse::<TargetKind>().map_err(|e| usage(e.to_string()))?;
    let mut config = TrainConfig { target_kind, seed: args.seed, ..TrainConfig::default() };
    args.flags.apply(&mut config).map_err(|e| usage(e.to_string()))?;
    let (_, report) = pipeline::run_train(&args.base, &args.pairs, &config, &args.out)?;
    eprintln!(
        "train[{target_kind}]: loss {:.6} -> {:.6} in {} steps ({:.2}s)",
        report.initial_loss, report.final_loss, report.steps, report.wall_time_secs
    );
    Ok(())
}

fn run_eval_retrieval(args: EvalRetrievalArgs) -> Result<()> {
    let qrels: Vec<_> = args.qrels.iter().map(|s| named_path(s, "default")).collect();
    let runs = args
        .run
        .iter()
        .map(|spec| {
            let (key, path) = named_path(spec, "run");
            let (model, dataset) = key.split_once(':').unwrap_or((&key, "default"));
            RunSpec { model: model.to_owned(), dataset: dataset.to_owned(), path }
        })
        .collect::<Vec<_>>();
    let rows = pipeline::run_eval_retrieval(&qrels, &runs, args.k, &args.out)?;
    for row in rows {
        println!("{}\t{}\t{}\t{:.6}", row.metric, row.model, row.dataset, row.value);
    }
    Ok(())
}

fn adapters(specs: &[String]) -> Vec<(String, PathBuf)> {
    specs.iter().map(|s| named_path(s, "adapter")).collect()
}

fn run_eval_heldout(args: EvalHeldoutArgs) -> Result<()> {
    let split = pipeline::load_split(&args.split, "eval-heldout")?;
    let base = pipeline::load_matrix(&args.base, "eval-heldout")?;
    let models = pipeline::heldout_models(&base, &split, &adapters(&args.adapter), "eval-heldout")?;
    let report = pipeline::evaluate_heldout(&models, &split, args.k)?;
    pipeline::write_heldout_report(&report, &args.out)?;
    for row in &report.metrics {
        println!("{}\t{}\t{:.6}", row.metric, row.model, row.value);
    }
    Ok(())
}

fn run_eval_dist(args: EvalDistArgs) -> Result<()> {
    let split = pipeline::load_split(&args.split, "eval-dist")?;
    let base = pipeline::load_matrix(&args.base, "eval-dist")?;
    let models = pipeline::heldout_models(&base, &split, &adapters(&args.adapter), "eval-dist")?;
    let mut binning = Binning::default();
    set(&mut binning.bins, args.bins);
    set(&mut binning.lo, args.lo);
    set(&mut binning.hi, args.hi);
    for row in pipeline::run_eval_dist(&models, binning, &args.out)? {
        println!("{}\t{}\t{:.6}", row.model_a, row.model_b, row.symmetric_kl);
    }
    Ok(())
}

fn read_pipeline_file(path: &Path) -> Result<PipelineFile> {
    pipeline::require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut file: PipelineFile = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = root.join(&*p);
        }
    };
    for p in [&mut file.out, &mut file.collection, &mut file.split, &mut file.base].into_iter().flatten() {
        resolve(p);
    }
    for p in file.experts.iter_mut().flatten() {
        resolve(p);
    }
    Ok(file)
}

fn pipeline_config(args: PipelineArgs) -> Result<PipelineConfig> {
    let file = match &args.config {
        Some(path) => read_pipeline_file(path)?,
        None => PipelineFile::default(),
    };
    let out = args.out.or(file.out).ok_or_else(|| usage("--out is required".into()))?;
    let collection = args.collection.or(file.collection);
    let inputs = match collection {
        Some(collection) => {
            let split =
                args.split.or(file.split).ok_or_else(|| usage("--split is required with --collection".into()))?;
            let base = args.base.or(file.base).ok_or_else(|| usage("--base is required with --collection".into()))?;
            let experts = if args.experts.is_empty() { file.experts.unwrap_or_default() } else { args.experts };
            if experts.is_empty() {
                return Err(usage("--experts is required with --collection".into()));
            }
            PipelineInputs::Files { collection, split, experts, base }
        }
        None => {
            let mut world = file.world.unwrap_or_default();
            args.world.apply(&mut world);
            PipelineInputs::Synthetic(world)
        }
    };
    let mut config = PipelineConfig::new(inputs, out);
    set(&mut config.seed, file.seed);
    set(&mut config.seed, args.seed);
    let train = &mut config.train;
    set(&mut train.learning_rate, file.lr);
    set(&mut train.batch_size, file.batch);
    set(&mut train.epochs, file.epochs);
    set(&mut train.init_noise, file.init_noise);
    if let Some(name) = &file.optimizer {
        train.optimizer = name.parse::<Optimizer>().map_err(usage)?;
    }
    args.train.apply(train).map_err(|e| usage(e.to_string()))?;
    let targets = if args.targets.is_empty() { file.targets.unwrap_or_default() } else { args.targets };
    if !targets.is_empty() {
        config.targets = parse_targets(&targets).map_err(|e| usage(e.to_string()))?;
    }
    set(&mut config.k, file.k);
    set(&mut config.k, args.k);
    set(&mut config.binning.bins, file.bins);
    set(&mut config.binning.bins, args.bins);
    Ok(config)
}

fn run_pipeline(args: PipelineArgs) -> Result<()> {
    let config = pipeline_config(args)?;
    let summary = pipeline::run_pipeline(&config)?;
    eprintln!("pipeline: {} pair records", summary.pairs);
    for (target, report) in &summary.train_reports {
        eprintln!("train[{target}]: loss {:.6} -> {:.6}", report.initial_loss, report.final_loss);
    }
    for row in &summary.metrics {
        println!("{}\t{}\t{:.6}", row.metric, row.model, row.value);
    }
    eprintln!("outputs in {}", config.out_dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>() {
        Some(e) => e.exit_code() as u8,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Pairgen(a) => run_pairgen(a),
        Command::Label(a) => run_label(a),
        Command::Train(a) => run_train(a),
        Command::EvalRetrieval(a) => run_eval_retrieval(a),
        Command::EvalHeldout(a) => run_eval_heldout(a),
        Command::EvalDist(a) => run_eval_dist(a),
        Command::Pipeline(a) => run_pipeline(*a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
