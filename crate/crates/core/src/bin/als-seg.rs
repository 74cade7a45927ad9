use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use als_seg::experiment::{
    cmd_diversity, cmd_eval, cmd_report, cmd_select, cmd_sweep, cmd_train, generate_synthetic_dataset, EvalSplit,
    ExperimentConfig, Preset, Shape, SweepGrid, SynthSpec, CONFIG_FILE, SWEEP_LOG_FILE,
};
use als_seg::strategies::Strategy;
use als_seg::Error;

const THREADS_VAR: &str = "ALS_SEG_THREADS";

#[derive(Parser)]
#[command(name = "als-seg", version, about = "Active-learning sample selection and adversarial semi-supervised segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: defaults, preset, file, `--set`, then explicit flags.
#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Dataset directory (holding index.tsv)
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Named hyperparameter bundle ("paper")
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Override any configuration key, e.g. --set gan.iterations=500
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Choose which training images get pixel labels
    Select(SelectArgs),
    /// Train the segmenter on a manifest plus the unlabeled pool
    Train(TrainArgs),
    /// Mean IoU of a checkpoint on a split
    Eval(EvalArgs),
    /// Shannon and Simpson indices of a manifest's labeled pixels
    Diversity(DiversityArgs),
    /// Write a synthetic imbalanced dataset to --output-dir
    Synth(SynthArgs),
    /// Merge finished run directories into report.csv
    Report(ReportArgs),
    /// Run selection over a grid of alpha_init, beta_q and strategy
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    beta_q: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest to train on (default: <output-dir>/manifest.tsv)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint base path to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Stop after this many steps in this invocation
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint base path (default: <output-dir>/model)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: EvalSplit,
    /// Manifest checked for leakage into the split
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct DiversityArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n_images: usize,
    /// HxW
    #[arg(long, default_value = "32x32")]
    image_size: String,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    /// Comma-separated prior over classes (last class is the rare one)
    #[arg(long, value_delimiter = ',')]
    class_prior: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "rectangle,disk,stripe")]
    shapes: Vec<Shape>,
    #[arg(long, default_value_t = 0.1)]
    rare_class_rate: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to merge
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "entropy")]
    strategies: Vec<Strategy>,
    /// Also train and evaluate each point
    #[arg(long)]
    train: bool,
}

fn threads_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_VAR}={v:?} is not a count")))?;
            if n == 0 {
                return Err(Error::Config(format!("{THREADS_VAR} must be positive")).into());
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn build_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &common.preset {
        cfg.apply_preset(p.parse::<Preset>()?);
    }
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(data) = &common.dataset {
        cfg.dataset_path = data.clone();
    }
    Ok(cfg)
}

fn set_if<T: ToString>(cfg: &mut ExperimentConfig, key: &str, value: &Option<T>) -> anyhow::Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = s.split_once('x').and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)));
    Ok(parsed.ok_or_else(|| Error::Config(format!("image size must be HxW, got {s:?}")))?)
}

fn synth_spec(args: &SynthArgs, seed: u64) -> anyhow::Result<SynthSpec> {
    let mut spec = SynthSpec::desk_default(seed);
    spec.n_images = args.n_images;
    spec.image_size = parse_size(&args.image_size)?;
    spec.num_classes = args.num_classes;
    spec.class_prior = match &args.class_prior {
        Some(p) => p.clone(),
        None if args.num_classes == 4 => spec.class_prior,
        None => {
            let common = args.num_classes.saturating_sub(1).max(1);
            let mut p = vec![1.0 / common as f64; common];
            p.resize(args.num_classes, 0.0);
            p
        }
    };
    spec.shapes = args.shapes.iter().copied().collect();
    spec.rare_class_rate = args.rare_class_rate;
    Ok(spec)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = threads_cap()?;
    if let Some(n) = threads {
        // Read by the tensor backend's thread pool on first use.
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    let mut cfg = build_config(&cli.common)?;

    match cli.command {
        Command::Select(a) => {
            set_if(&mut cfg, "selection.strategy", &a.strategy)?;
            set_if(&mut cfg, "selection.labeled_ratio", &a.labeled_ratio)?;
            set_if(&mut cfg, "selection.alpha_init", &a.alpha_init)?;
            set_if(&mut cfg, "selection.beta_q", &a.beta_q)?;
            let manifest = cmd_select(&cfg)?;
            println!("selected {} images -> {}", manifest.entries.len(), cfg.output_dir.display());
        }
        Command::Train(a) => {
            set_if(&mut cfg, "gan.iterations", &a.iterations)?;
            let out = cmd_train(&cfg, a.manifest.as_deref(), a.resume.as_deref(), a.stop_after)?;
            println!("trained to iteration {}; checkpoint {}", out.iterations, out.checkpoint.display());
        }
        Command::Eval(a) => {
            let report = cmd_eval(&cfg, a.checkpoint.as_deref(), a.split, a.manifest.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Diversity(a) => {
            let report = cmd_diversity(&cfg, a.manifest.as_deref())?;
            println!("shannon={}\nsimpson={}", report.shannon, report.simpson);
        }
        Command::Synth(a) => {
            let spec = synth_spec(&a, cfg.seed)?;
            let records = generate_synthetic_dataset(&spec, &cfg.output_dir)?;
            println!("wrote {} images to {}", records.len(), cfg.output_dir.display());
        }
        Command::Report(a) => {
            let rows = cmd_report(&a.runs, &cfg.output_dir)?;
            println!("merged {} runs into {}", rows.len(), cfg.output_dir.display());
        }
        Command::Sweep(a) => {
            let grid = SweepGrid { alpha_init: a.alphas, beta_q: a.betas, strategies: a.strategies };
            let workers = threads.unwrap_or(1);
            if threads.is_some() {
                // Points run side by side; keep each one single-threaded.
                std::env::set_var("RAYON_NUM_THREADS", "1");
            }
            let outcomes = cmd_sweep(&cfg, &grid, a.train, workers)?;
            let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
            println!("{} points, {failed} failed; see {}", outcomes.len(), cfg.output_dir.join(SWEEP_LOG_FILE).display());
        }
    }
    log::debug!("effective configuration in {}", cfg.output_dir.join(CONFIG_FILE).display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).context("als-seg failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
