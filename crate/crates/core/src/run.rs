//! End-to-end runs shared by the command line and the tests: load a resolved
//! configuration's data, train with on-disk artifacts, time epochs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::Resolved;
use crate::data::{load_embeddings, load_interactions, prepare_dataset, EmbeddingStore, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Catalog, EvalOptions, MetricsReport};
use crate::model::{ModelConfig, SideNetwork};
use crate::trainer::{train_epoch, Checkpoint, DataPaths, TrainConfig, TrainState};

pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const EPOCHS_CSV: &str = "epochs.csv";

pub struct Experiment {
    pub resolved: Resolved,
    pub store: EmbeddingStore,
    pub data: SplitDataset,
    pub paths: DataPaths,
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| Error::Config(format!("no {what} path given in the config")))
}

impl Experiment {
    pub fn load(resolved: Resolved) -> Result<Self> {
        let ip = required(&resolved.interactions, "interactions")?;
        let ep = required(&resolved.embeddings, "embeddings")?;
        let store = load_embeddings(&ep)?;
        let log = load_interactions(&ip)?;
        let data = prepare_dataset(&log, &store, &resolved.pipeline)?;
        log::info!(
            "{} users, {} training examples, {} items, {} stored layers",
            data.users.len(),
            data.train_examples.len(),
            store.len(),
            store.layers()
        );
        Ok(Experiment {
            paths: DataPaths {
                interactions: ip.display().to_string(),
                embeddings: ep.display().to_string(),
            },
            resolved,
            store,
            data,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.resolved.model.with_d_llm(self.store.d_llm())
    }

    /// Trains a fresh model, or continues `resume`, writing checkpoints and
    /// the epoch CSV under `out_dir` when given.
    pub fn train(&self, out_dir: Option<&Path>, resume: Option<&Checkpoint>) -> Result<TrainState> {
        let model_cfg = self.model_config();
        model_cfg.check_store(&self.store)?;
        let mut state = match resume {
            Some(ckpt) => {
                if ckpt.manifest.model != model_cfg || ckpt.manifest.pipeline != self.resolved.pipeline {
                    return Err(Error::Config(
                        "the checkpoint was trained with a different model or pipeline configuration".into(),
                    ));
                }
                TrainState::resume(ckpt, self.resolved.train.clone())?
            }
            None => TrainState::new(model_cfg, self.resolved.train.clone())?,
        };
        let mut csv = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(EpochCsv::open(&dir.join(EPOCHS_CSV), resume.is_some())?)
            }
            None => None,
        };
        let pipeline = self.resolved.pipeline.clone();
        let start = Instant::now();
        state.fit(&self.store, &self.data, |st, r| {
            log::info!(
                "epoch {:>3}  loss {:.5}  val R@10 {:.4}{}  {:.2}s",
                r.entry.epoch,
                r.entry.loss,
                r.entry.val_recall_10,
                if r.improved { " *" } else { "" },
                r.stats.seconds
            );
            if let (Some(csv), Some(dir)) = (csv.as_mut(), out_dir) {
                csv.row(
                    r.entry.epoch,
                    r.entry.loss,
                    r.entry.val_recall_10,
                    start.elapsed().as_secs_f64(),
                )?;
                st.last_checkpoint(&pipeline, Some(&self.paths))?
                    .save(&dir.join(LAST_CKPT))?;
            }
            Ok(())
        })?;
        if let Some(dir) = out_dir {
            state
                .best_checkpoint(&pipeline, Some(&self.paths))?
                .save(&dir.join(BEST_CKPT))?;
            state
                .last_checkpoint(&pipeline, Some(&self.paths))?
                .save(&dir.join(LAST_CKPT))?;
        }
        Ok(state)
    }

    pub fn evaluate(&self, model: &SideNetwork, split: Split, opts: EvalOptions) -> Result<MetricsReport> {
        let catalog = Catalog::new(model.catalog(&self.store)?)?;
        let name = match split {
            Split::Val => "val",
            Split::Test => "test",
        };
        evaluate(model, &catalog, name, &self.data.examples(split), opts)
    }
}

struct EpochCsv {
    file: fs::File,
}

impl EpochCsv {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if !exists {
            writeln!(file, "epoch,loss,val_r10,wall_seconds").map_err(|e| Error::io(path, e))?;
        }
        Ok(EpochCsv { file })
    }

    fn row(&mut self, epoch: usize, loss: f64, r10: f64, secs: f64) -> Result<()> {
        writeln!(self.file, "{epoch},{loss},{r10},{secs:.3}").map_err(|e| Error::io("epochs.csv", e))
    }
}

/// Mean wall seconds of `epochs` training epochs from a fresh model.
pub fn time_epochs(
    model: ModelConfig,
    train: &TrainConfig,
    store: &EmbeddingStore,
    data: &SplitDataset,
    epochs: usize,
) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::Config("timing needs at least one epoch".into()));
    }
    model.check_store(store)?;
    let mut st = TrainState::new(model, train.clone())?;
    let start = Instant::now();
    for e in 1..=epochs {
        train_epoch(&mut st.model, &mut st.adam, store, &data.train_examples, train, e)?;
    }
    Ok(start.elapsed().as_secs_f64() / epochs as f64)
}
