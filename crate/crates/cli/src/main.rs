//! `cdpl-net`: train, evaluate and inspect CDPL-Net models.
//!
//! Exit codes: 0 success, 1 verification failure (or a failed run),
//! 2 usage or configuration error, 3 I/O or file-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdpl_core::data::{load_idx_dir, Dataset, Split};
use cdpl_core::eval::{clustering_ac_restarts, evaluate, extract_features};
use cdpl_core::gradcheck::{run_suite, CheckKind, FaultInjection};
use cdpl_core::optim::train;
use cdpl_core::{Error, LayerTag, Model, ModelConfig, SeedStreams, TrainRecipe};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cdpl-net",
    version,
    about = "Convolutional dictionary pair learning network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Test-set accuracy and confusion matrix.
    Eval(EvalArgs),
    /// Dump one layer's activations as CSV.
    Features(FeaturesArgs),
    /// k-means clustering accuracy of one layer's activations.
    ClusterAc(ClusterArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's parameter counts and config.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DatasetName {
    Mnist,
    FashionMnist,
}

impl DatasetName {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the IDX files, or a parent with a subdirectory per dataset.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetName,
}

impl DataArgs {
    fn load(&self, split: Split) -> Result<Dataset, Error> {
        let nested = self.data_dir.join(self.dataset.dir_name());
        let dir = if nested.is_dir() {
            nested
        } else {
            self.data_dir.clone()
        };
        load_idx_dir(&dir, split, self.dataset.dir_name())
    }
}

/// Each flag replaces the config key of the same name.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    atoms_dpl3: Option<usize>,
    #[arg(long)]
    atoms_dpl6: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_dpl_layers: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stop_recon_grad_at_x: Option<bool>,
    #[arg(long)]
    class_count: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ModelConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    cfg.$f = v;
                }
            )*};
        }
        set!(
            atoms_dpl3,
            atoms_dpl6,
            beta,
            gamma,
            lr,
            batch_size,
            epochs,
            seed,
            no_dpl_layers,
            stop_recon_grad_at_x,
            class_count
        );
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON config; defaults are used for a missing file argument.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Stratified training subset: this many samples per class.
    #[arg(long)]
    subset_per_class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Write the confusion matrix CSV here.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    layer: String,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    layer: String,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    /// Number of leading test samples to cluster.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of one check's analytic gradient (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

const EVAL_BATCH: usize = 256;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Features(a) => run_features(a),
        Command::ClusterAc(a) => run_cluster(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::UnknownLayer(_)
        | Error::ConfigMismatch(_)
        | Error::InsufficientSamples { .. } => 2,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::Pgm { .. }
        | Error::CheckpointVersion { .. }
        | Error::CorruptCheckpoint(_)
        | Error::Json(_) => 3,
        _ => 1,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn limited(ds: Dataset, limit: Option<usize>) -> Result<Dataset, Error> {
    match limit {
        Some(n) if n < ds.len() => ds.head(n),
        _ => Ok(ds),
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            // Parsed without validation so overrides can repair a field first.
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ModelConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;

    let full = args.data.load(Split::Train)?;
    let dataset = match args.subset_per_class {
        Some(n) => full.subset(n, &mut SeedStreams::new(cfg.seed).stream("subset"))?,
        None => full,
    };
    eprintln!(
        "training on {} samples of {} for {} epochs (seed {})",
        dataset.len(),
        dataset.name,
        cfg.epochs,
        cfg.seed
    );
    let mut model = Model::<f32>::build(&cfg)?;
    let recipe = TrainRecipe::from_config(&cfg);
    let log = match train(&mut model, &dataset, &recipe, |_, _| {}) {
        Ok(log) => log,
        Err(e) => {
            // Keep the last good parameters for inspection.
            let partial = args.out.with_extension("partial.ckpt");
            if model.save(&partial).is_ok() {
                eprintln!("last good parameters saved to {}", partial.display());
            }
            return Err(e);
        }
    };
    for e in &log.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.5}  ce {:.5}  recon3 {:.5}  recon6 {:.5}  acc {:.4}",
            e.epoch,
            e.mean_total_loss,
            e.mean_ce,
            e.mean_recon_dpl3,
            e.mean_recon_dpl6,
            e.train_acc
        );
    }
    model.save(&args.out)?;
    if let Some(path) = &args.log {
        write(path, &log.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let model = Model::<f32>::load(&args.checkpoint)?;
    let ds = limited(args.data.load(split(args.split))?, args.limit)?;
    let (acc, cm) = evaluate(&model, &ds, EVAL_BATCH)?;
    if let Some(path) = &args.confusion {
        write(path, &cm.to_csv())?;
    }
    println!("accuracy={acc}");
    Ok(ExitCode::SUCCESS)
}

fn run_features(args: FeaturesArgs) -> Result<ExitCode, Error> {
    let layer: LayerTag = args.layer.parse()?;
    let model = Model::<f32>::load(&args.checkpoint)?;
    let ds = limited(args.data.load(split(args.split))?, args.limit)?;
    let dump = extract_features(&model, &ds, layer, EVAL_BATCH)?;
    write(&args.out, &dump.to_csv())?;
    eprintln!("wrote {} x {} features of {layer}", ds.len(), dump.dim());
    Ok(ExitCode::SUCCESS)
}

fn run_cluster(args: ClusterArgs) -> Result<ExitCode, Error> {
    let layer: LayerTag = args.layer.parse()?;
    let model = Model::<f32>::load(&args.checkpoint)?;
    let ds = limited(args.data.load(Split::Test)?, Some(args.samples))?;
    let dump = extract_features(&model, &ds, layer, EVAL_BATCH)?;
    let summary = clustering_ac_restarts(&dump, ds.classes, args.runs, args.seed)?;
    println!(
        "layer={layer} runs={} mean_ac={} max_ac={}",
        args.runs, summary.mean, summary.max
    );
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let fault = match &args.inject_fault {
        Some(name) => FaultInjection(Some(name.parse::<CheckKind>()?)),
        None => FaultInjection::default(),
    };
    let report = run_suite(args.seed, fault)?;
    print!("{report}");
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        let names: Vec<&str> = report.failures().iter().map(|k| k.as_str()).collect();
        eprintln!("gradient check failed: {}", names.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn run_inspect(args: InspectArgs) -> Result<ExitCode, Error> {
    let model = Model::<f32>::load(&args.checkpoint)?;
    let report = model.parameter_report();
    println!("{:<6} {:>10}", "layer", "params");
    for (name, count) in &report {
        println!("{name:<6} {count:>10}");
    }
    println!(
        "{:<6} {:>10}",
        "total",
        report.iter().map(|(_, c)| c).sum::<usize>()
    );
    println!(
        "config {}",
        serde_json::to_string(model.config()).expect("config serializes")
    );
    Ok(ExitCode::SUCCESS)
}
