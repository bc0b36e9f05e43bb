use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ssna::config::{RunConfig, TrainOverrides};
use ssna::data::{generate_synthetic, prepare_dataset, save_embeddings, LogStats, Split, SyntheticSpec};
use ssna::data::{load_embeddings, load_interactions, PipelineConfig};
use ssna::eval::{EvalOptions, MetricsReport};
use ssna::model::Variant;
use ssna::run::{time_epochs, Experiment};
use ssna::trainer::{model_from_checkpoint, Checkpoint};
use ssna::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ssna",
    version,
    about = "Side sequential network adaptation over frozen LLM item embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args)]
struct Overrides {
    /// Named preset, e.g. distilbert-sci.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Number of adapted layers, counted from the top.
    #[arg(long)]
    a: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl Overrides {
    fn layer(&self) -> RunConfig {
        RunConfig {
            preset: self.preset.clone(),
            variant: self.variant,
            a: self.a,
            train: TrainOverrides {
                seed: self.seed,
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                ..TrainOverrides::default()
            },
            ..RunConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered synthetic dataset.
    Synth {
        /// JSON synthetic-dataset spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model; writes best.ckpt, last.ckpt and epochs.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Continue from a last.ckpt; --epochs sets the new total.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Remove the user's earlier items from the ranking.
        #[arg(long)]
        exclude_history: bool,
        /// Override the data paths recorded in the checkpoint.
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train one model per value of a parameter and tabulate the results.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// CSV destination; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time training epochs while varying the number of stored layers.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Stored layer counts to compare; each must not exceed the file's.
        #[arg(long, value_delimiter = ',', required = true)]
        stored: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        timed_epochs: usize,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SSNA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SSNA_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(spec: &Path, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| io_err(spec, e))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let (log, store) = generate_synthetic(&spec)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    log.save(&out_dir.join("interactions.jsonl"))?;
    save_embeddings(&store, &out_dir.join("embeddings.ssnaemb"))?;
    println!("{}", LogStats::of(&log));
    Ok(())
}

fn train(config: &Path, overrides: &Overrides, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    let resolved = RunConfig::load(config)?.resolve(&overrides.layer())?;
    let exp = Experiment::load(resolved)?;
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let state = exp.train(Some(out_dir), ckpt.as_ref())?;
    let best = state.best.as_ref().expect("fit records a best epoch");
    println!("best epoch {}", best.epoch);
    println!("{}", MetricsReport::table(std::slice::from_ref(&best.metrics)));
    Ok(())
}

fn eval(
    checkpoint: &Path,
    split: Split,
    exclude_history: bool,
    interactions: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let m = &ckpt.manifest;
    let recorded = m.data.as_ref();
    let pick = |flag: Option<&Path>, rec: Option<&String>, what: &str| -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| rec.map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("checkpoint records no {what} path; pass --{what}")))
    };
    let ip = pick(interactions, recorded.map(|d| &d.interactions), "interactions")?;
    let ep = pick(embeddings, recorded.map(|d| &d.embeddings), "embeddings")?;
    let store = load_embeddings(&ep)?;
    let log = load_interactions(&ip)?;
    let data = prepare_dataset(&log, &store, &m.pipeline)?;
    let model = model_from_checkpoint(&ckpt)?;
    model.config.check_store(&store)?;
    let catalog = ssna::eval::Catalog::new(model.catalog(&store)?)?;
    let name = match split {
        Split::Val => "val",
        Split::Test => "test",
    };
    let opts = EvalOptions {
        exclude_history: exclude_history || m.train.exclude_history,
    };
    let report = ssna::eval::evaluate(&model, &catalog, name, &data.examples(split), opts)?;
    println!("{}", MetricsReport::table(std::slice::from_ref(&report)));
    println!("{}", report.to_json());
    Ok(())
}

fn sweep_layer(param: &str, value: &str) -> Result<RunConfig> {
    let bad = |e: String| Error::Config(format!("--param {param}: value {value:?}: {e}"));
    let int = || value.parse::<usize>().map_err(|e| bad(e.to_string()));
    let real = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
    let mut cfg = RunConfig::default();
    match param {
        "a" => cfg.a = Some(int()?),
        "n_p" => cfg.n_p = Some(int()?),
        "dim" => cfg.dim = Some(int()?),
        "blocks" => cfg.blocks = Some(int()?),
        "batch_size" => cfg.train.batch_size = Some(int()?),
        "learning_rate" => cfg.train.learning_rate = Some(real()?),
        "tau" => cfg.train.tau = Some(real()?),
        "seed" => cfg.train.seed = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
        "variant" => cfg.variant = Some(value.parse()?),
        _ => {
            return Err(Error::Config(format!(
                "cannot sweep {param:?}; one of a, n_p, dim, blocks, batch_size, learning_rate, tau, seed, variant"
            )))
        }
    }
    Ok(cfg)
}

fn sweep(param: &str, values: &[String], config: &Path, overrides: &Overrides, out: Option<&Path>) -> Result<()> {
    let file = RunConfig::load(config)?;
    let cli = overrides.layer();
    let mut csv = format!("{param},best_epoch,val_r10,val_n10,test_r10,test_n10\n");
    let mut loaded: Option<(PipelineConfig, Experiment)> = None;
    for value in values {
        let mut layer = cli.clone();
        layer.merge(&sweep_layer(param, value)?);
        let resolved = file.resolve(&layer)?;
        // Reload data only when the pipeline changes.
        let exp = match loaded.take() {
            Some((p, mut exp)) if p == resolved.pipeline => {
                exp.resolved = resolved;
                exp
            }
            _ => Experiment::load(resolved)?,
        };
        let state = exp.train(None, None)?;
        let best = state.best.as_ref().expect("fit records a best epoch");
        let test = exp.evaluate(
            &state.best_model(),
            Split::Test,
            EvalOptions {
                exclude_history: exp.resolved.train.exclude_history,
            },
        )?;
        csv.push_str(&format!(
            "{value},{},{},{},{},{}\n",
            best.epoch, best.metrics.recall_10, best.metrics.ndcg_10, test.recall_10, test.ndcg_10
        ));
        loaded = Some((exp.resolved.pipeline.clone(), exp));
    }
    print!("{csv}");
    if let Some(out) = out {
        write_file(out, &csv)?;
    }
    Ok(())
}

fn bench(config: &Path, overrides: &Overrides, stored: &[usize], timed_epochs: usize) -> Result<()> {
    let resolved = RunConfig::load(config)?.resolve(&overrides.layer())?;
    let exp = Experiment::load(resolved)?;
    let model = exp.model_config();
    println!("stored_layers,adapted_layers,epoch_seconds");
    for &n in stored {
        let store = exp.store.with_top_layers(n)?;
        let secs = time_epochs(model.clone(), &exp.resolved.train, &store, &exp.data, timed_epochs)?;
        println!("{n},{},{secs:.4}", model.a);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { spec, out_dir } => synth(&spec, &out_dir),
        Command::Train {
            config,
            overrides,
            out_dir,
            resume,
        } => train(&config, &overrides, &out_dir, resume.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            exclude_history,
            interactions,
            embeddings,
        } => eval(
            &checkpoint,
            split.into(),
            exclude_history,
            interactions.as_deref(),
            embeddings.as_deref(),
        ),
        Command::Sweep {
            param,
            values,
            config,
            overrides,
            out,
        } => sweep(&param, &values, &config, &overrides, out.as_deref()),
        Command::Bench {
            config,
            overrides,
            stored,
            timed_epochs,
        } => bench(&config, &overrides, &stored, timed_epochs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
