//! Adam training with in-batch negatives, gradient accumulation and
//! selection of the best epoch by validation Recall@10.

pub mod adam;
pub mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{Checkpoint, DataPaths, HistoryEntry, Manifest, RngState};

use crate::adapter::RoutingMode;
use crate::data::{EmbeddingStore, Example, PipelineConfig, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Catalog, EvalOptions, MetricsReport};
use crate::model::{ModelConfig, SideNetwork};
use crate::numerics::{Tape, Tensor};
use crate::objective::{DuplicatePolicy, Temperature, DEFAULT_TEMPERATURE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    /// Global gradient-norm clip, off when absent.
    pub clip_norm: Option<f64>,
    pub exclude_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 256,
            accumulation_steps: 1,
            epochs: 100,
            tau: DEFAULT_TEMPERATURE,
            seed: 0,
            clip_norm: None,
            exclude_history: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Config("accumulation_steps must be >= 1".into()));
        }
        Temperature::new(self.tau)?;
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn temperature(&self) -> Result<Temperature> {
        Temperature::new(self.tau)
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            exclude_history: self.exclude_history,
        }
    }
}

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Routing = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of `stream` in `epoch` for a run seeded with `seed`.
pub fn derive_seed(seed: u64, epoch: usize, stream: Stream) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ stream as u64)
}

/// Example order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        epoch,
        Stream::Shuffle,
    )));
    order
}

/// Routing noise stream of one batch.
pub fn batch_routing(seed: u64, epoch: usize, batch: usize) -> RoutingMode {
    RoutingMode::Sample(splitmix(derive_seed(seed, epoch, Stream::Routing) ^ batch as u64))
}

/// Batch boundaries over `n` examples. A final batch of one is dropped.
pub fn plan_batches(n: usize, batch_size: usize) -> Result<Vec<std::ops::Range<usize>>> {
    let mut out: Vec<_> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.last().is_some_and(|r| r.len() < 2) {
        out.pop();
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{n} training examples; at least 2 are needed per batch"
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub seconds: f64,
    pub examples: usize,
    pub batches: usize,
    pub steps: usize,
}

fn optimizer_step(model: &mut SideNetwork, adam: &mut Adam, cfg: &TrainConfig) -> Result<()> {
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(&mut model.params, c);
    }
    adam.step(&mut model.params)
}

/// One pass over `examples` in the epoch's shuffled order.
///
/// Gradients of `accumulation_steps` consecutive batches are averaged
/// before each optimizer step; a trailing partial window is averaged over
/// the batches it holds.
pub fn train_epoch(
    model: &mut SideNetwork,
    adam: &mut Adam,
    store: &EmbeddingStore,
    examples: &[Example],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let start = Instant::now();
    let tau = cfg.temperature()?;
    let order = epoch_order(cfg.seed, epoch, examples.len());
    let batches = plan_batches(order.len(), cfg.batch_size)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, Stream::Dropout));
    let use_dropout = model.config.dropout > 0.0;
    let k = cfg.accumulation_steps;

    model.params.zero_grads();
    let (mut loss_sum, mut seen, mut steps, mut window) = (0.0, 0, 0, 0);
    for (j, range) in batches.iter().enumerate() {
        let batch: Vec<&Example> = order[range.clone()].iter().map(|&i| &examples[i]).collect();
        let grads = {
            let mut tape = Tape::new(&model.params);
            let loss = model.batch_loss(
                &mut tape,
                store,
                &batch,
                batch_routing(cfg.seed, epoch, j),
                if use_dropout { Some(&mut dropout_rng) } else { None },
                tau,
                DuplicatePolicy::Lenient,
            )?;
            loss_sum += tape.scalar(loss);
            tape.backward(loss)?
        };
        model.params.accumulate(&grads, 1.0 / k as f64);
        seen += batch.len();
        window += 1;
        if window == k {
            optimizer_step(model, adam, cfg)?;
            steps += 1;
            window = 0;
        }
    }
    if window > 0 {
        model.params.scale_grads(k as f64 / window as f64);
        optimizer_step(model, adam, cfg)?;
        steps += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / batches.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
        examples: seen,
        batches: batches.len(),
        steps,
    })
}

/// 1-based index of the first maximum.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Parameter values of the best epoch so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub values: Vec<Tensor>,
    pub metrics: MetricsReport,
}

/// Everything needed to continue or reproduce a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SideNetwork,
    pub adam: Adam,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<HistoryEntry>,
    pub last_metrics: Option<MetricsReport>,
    pub best: Option<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub entry: HistoryEntry,
    pub stats: EpochStats,
    pub metrics: MetricsReport,
    pub improved: bool,
}

pub fn validation_report(
    model: &SideNetwork,
    store: &EmbeddingStore,
    data: &SplitDataset,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let catalog = Catalog::new(model.catalog(store)?)?;
    evaluate(model, &catalog, "val", &data.examples(Split::Val), opts)
}

impl TrainState {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = SideNetwork::new(model, derive_seed(train.seed, 0, Stream::Init))?;
        let adam = Adam::new(&model.params, train.learning_rate)?;
        Ok(TrainState {
            model,
            adam,
            train,
            epoch: 0,
            history: Vec::new(),
            last_metrics: None,
            best: None,
        })
    }

    fn snapshot(&self, metrics: MetricsReport) -> Snapshot {
        Snapshot {
            epoch: self.epoch,
            values: self.model.params.leaves().iter().map(|l| l.value.clone()).collect(),
            metrics,
        }
    }

    /// The model at its best epoch (or as it stands if none is recorded).
    pub fn best_model(&self) -> SideNetwork {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            for (id, v) in m.params.ids().collect::<Vec<_>>().into_iter().zip(&best.values) {
                *m.params.value_mut(id) = v.clone();
            }
        }
        m
    }

    /// Trains until `self.train.epochs` epochs are complete.
    ///
    /// With zero epochs the initial model is evaluated and kept as best.
    /// Otherwise candidates are epochs 1.. and ties go to the earliest.
    pub fn fit(
        &mut self,
        store: &EmbeddingStore,
        data: &SplitDataset,
        mut on_epoch: impl FnMut(&TrainState, &EpochReport) -> Result<()>,
    ) -> Result<()> {
        if data.train_examples.is_empty() {
            return Err(Error::Empty("training examples".into()));
        }
        if data.users.is_empty() {
            return Err(Error::Empty("validation split".into()));
        }
        self.model.config.check_store(store)?;
        let opts = self.train.eval_options();
        if self.train.epochs == 0 && self.best.is_none() {
            let metrics = validation_report(&self.model, store, data, opts)?;
            self.best = Some(self.snapshot(metrics.clone()));
            self.last_metrics = Some(metrics);
        }
        while self.epoch < self.train.epochs {
            let epoch = self.epoch + 1;
            let stats = train_epoch(
                &mut self.model,
                &mut self.adam,
                store,
                &data.train_examples,
                &self.train,
                epoch,
            )?;
            self.epoch = epoch;
            let metrics = validation_report(&self.model, store, data, opts)?;
            let entry = HistoryEntry {
                epoch,
                loss: stats.loss,
                val_recall_10: metrics.recall_10,
            };
            self.history.push(entry.clone());
            let improved = self
                .best
                .as_ref()
                .is_none_or(|b| b.epoch == 0 || metrics.recall_10 > b.metrics.recall_10);
            if improved {
                self.best = Some(self.snapshot(metrics.clone()));
            }
            self.last_metrics = Some(metrics.clone());
            let report = EpochReport {
                entry,
                stats,
                metrics,
                improved,
            };
            on_epoch(self, &report)?;
        }
        Ok(())
    }

    fn manifest(&self, kind: &str, pipeline: &PipelineConfig, data: Option<&DataPaths>) -> Result<Manifest> {
        let best = self
            .best
            .as_ref()
            .ok_or_else(|| Error::Data("no epoch has been evaluated yet".into()))?;
        let (epoch, metrics) = if kind == "best" {
            (best.epoch, best.metrics.clone())
        } else {
            (self.epoch, self.last_metrics.clone().expect("evaluated with best"))
        };
        Ok(Manifest {
            kind: kind.to_string(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            pipeline: pipeline.clone(),
            data: data.cloned(),
            epoch,
            metrics,
            rng: RngState {
                seed: self.train.seed,
                next_epoch: self.epoch + 1,
            },
            adam_step: self.adam.step,
            best_epoch: best.epoch,
            best_metrics: best.metrics.clone(),
            history: self.history.clone(),
        })
    }

    /// Parameters of the best epoch only.
    pub fn best_checkpoint(&self, pipeline: &PipelineConfig, data: Option<&DataPaths>) -> Result<Checkpoint> {
        let manifest = self.manifest("best", pipeline, data)?;
        let best = self.best.as_ref().expect("checked by manifest");
        let tensors = self
            .model
            .params
            .leaves()
            .iter()
            .zip(&best.values)
            .map(|(l, v)| (format!("param/{}", l.name), v.clone()))
            .collect();
        Ok(Checkpoint { manifest, tensors })
    }

    /// Current parameters, optimizer moments and the best snapshot.
    pub fn last_checkpoint(&self, pipeline: &PipelineConfig, data: Option<&DataPaths>) -> Result<Checkpoint> {
        let manifest = self.manifest("last", pipeline, data)?;
        let best = self.best.as_ref().expect("checked by manifest");
        let leaves = self.model.params.leaves();
        let mut tensors = Vec::with_capacity(leaves.len() * 4);
        for (prefix, values) in [
            ("param/", leaves.iter().map(|l| &l.value).collect::<Vec<_>>()),
            ("adam.m/", self.adam.m.iter().collect()),
            ("adam.v/", self.adam.v.iter().collect()),
            ("best/", best.values.iter().collect()),
        ] {
            for (l, v) in leaves.iter().zip(values) {
                tensors.push((format!("{prefix}{}", l.name), v.clone()));
            }
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Resumes from a `last` checkpoint. `train` may raise the epoch budget.
    pub fn resume(ckpt: &Checkpoint, train: TrainConfig) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.kind != "last" {
            return Err(Error::Config(format!("cannot resume from a {} checkpoint", m.kind)));
        }
        let mut fixed = m.train.clone();
        fixed.epochs = train.epochs;
        if fixed != train {
            return Err(Error::Config("resumed runs may only change the epoch budget".into()));
        }
        let model = model_from_checkpoint(ckpt)?;
        let group = |prefix: &str| -> Result<Vec<Tensor>> {
            model
                .params
                .leaves()
                .iter()
                .map(|l| {
                    ckpt.tensor(&format!("{prefix}{}", l.name))
                        .filter(|t| t.shape() == l.value.shape())
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("checkpoint lacks {prefix}{}", l.name)))
                })
                .collect()
        };
        let adam = Adam {
            lr: train.learning_rate,
            step: m.adam_step,
            m: group("adam.m/")?,
            v: group("adam.v/")?,
        };
        Ok(TrainState {
            best: Some(Snapshot {
                epoch: m.best_epoch,
                values: group("best/")?,
                metrics: m.best_metrics.clone(),
            }),
            model,
            adam,
            train,
            epoch: m.epoch,
            history: m.history.clone(),
            last_metrics: Some(m.metrics.clone()),
        })
    }
}

/// Rebuilds the network stored under `param/`.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<SideNetwork> {
    let mut model = SideNetwork::new(ckpt.manifest.model.clone(), 0)?;
    let expected = model.params.len();
    let stored = ckpt.group("param/").count();
    if stored != expected {
        return Err(Error::Data(format!(
            "checkpoint holds {stored} parameters, model expects {expected}"
        )));
    }
    for (name, t) in ckpt.group("param/") {
        model
            .params
            .set_value(name, t.clone())
            .map_err(|e| Error::Data(format!("checkpoint parameter {name}: {e}")))?;
    }
    Ok(model)
}
