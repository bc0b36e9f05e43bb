//! Cosine scoring and the temperature-scaled in-batch-negative objective.
//!
//! For user `j` in a batch the candidates are its own positive and the
//! positives of every other user; the loss is the mean softmax cross-entropy
//! of picking the own positive, with logits `cos(u_j, v_i) / τ`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{cosine, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::Config(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(DEFAULT_TEMPERATURE)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Temperature::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// What to do when two users in a batch share the same positive item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplicatePolicy {
    Strict,
    /// Drop the shared item from the other users' negatives.
    #[default]
    Lenient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEntry {
    pub intent: Vec<f64>,
    pub positive: Vec<f64>,
    /// Catalog id of the positive, used to find duplicates.
    pub item: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub entries: Vec<BatchEntry>,
}

/// `r = cos(u, v)`.
pub fn score(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine(u, v)
}

/// Candidate mask for each user: its own positive plus every other
/// positive that is a different item. `None` when nothing is masked.
pub fn negative_mask(items: &[usize], policy: DuplicatePolicy) -> Result<Option<Vec<bool>>> {
    let b = items.len();
    let mut mask = vec![true; b * b];
    let mut duplicates = 0;
    for j in 0..b {
        for i in 0..b {
            if i != j && items[i] == items[j] {
                mask[j * b + i] = false;
                duplicates += 1;
            }
        }
    }
    if duplicates == 0 {
        return Ok(None);
    }
    match policy {
        DuplicatePolicy::Strict => Err(Error::Data(format!(
            "batch contains duplicate positive items ({} pairs)",
            duplicates / 2
        ))),
        DuplicatePolicy::Lenient => Ok(Some(mask)),
    }
}

/// In-batch loss on the tape. `intents` and `positives` are `b × d`.
pub fn in_batch_loss(
    tape: &mut Tape<'_>,
    intents: Var,
    positives: Var,
    items: &[usize],
    tau: Temperature,
    policy: DuplicatePolicy,
) -> Result<Var> {
    let b = tape.shape(intents).0;
    if b < 2 {
        return Err(Error::Data(format!(
            "in-batch negatives need at least 2 users, got {b}"
        )));
    }
    if tape.shape(positives) != tape.shape(intents) || items.len() != b {
        return Err(shape_err(format!(
            "intents {:?}, positives {:?}, {} items",
            tape.shape(intents),
            tape.shape(positives),
            items.len()
        )));
    }
    let u = tape.normalize_rows(intents)?;
    let v = tape.normalize_rows(positives)?;
    let cos = tape.matmul_bt(u, v)?;
    scores_loss(tape, cos, items, tau, policy)
}

/// Loss from a `b × b` cosine matrix whose diagonal holds the positives.
fn scores_loss(
    tape: &mut Tape<'_>,
    scores: Var,
    items: &[usize],
    tau: Temperature,
    policy: DuplicatePolicy,
) -> Result<Var> {
    let (b, c) = tape.shape(scores);
    if b != c || items.len() != b {
        return Err(shape_err(format!(
            "score matrix {:?} for {} items",
            (b, c),
            items.len()
        )));
    }
    let mask = negative_mask(items, policy)?;
    let logits = tape.scale(scores, 1.0 / tau.get());
    let targets: Vec<usize> = (0..b).collect();
    tape.cross_entropy(logits, &targets, mask.as_deref())
}

/// [`batch_loss`] evaluated directly on a score matrix `S[j][i] = cos(u_j, v_i)`.
pub fn loss_from_scores(scores: &Tensor, items: &[usize], tau: Temperature, policy: DuplicatePolicy) -> Result<f64> {
    if scores.rows() < 2 {
        return Err(Error::Data("in-batch negatives need at least 2 users".into()));
    }
    let store = crate::numerics::ParamStore::new();
    let mut tape = Tape::new(&store);
    let s = tape.constant(scores.clone());
    let loss = scores_loss(&mut tape, s, items, tau, policy)?;
    Ok(tape.scalar(loss))
}

pub fn batch_loss(batch: &TrainBatch, tau: Temperature, policy: DuplicatePolicy) -> Result<f64> {
    let b = batch.entries.len();
    if b < 2 {
        return Err(Error::Data(format!(
            "in-batch negatives need at least 2 users, got {b}"
        )));
    }
    let items: Vec<usize> = batch.entries.iter().map(|e| e.item).collect();
    if policy == DuplicatePolicy::Lenient && negative_mask(&items, DuplicatePolicy::Strict).is_err() {
        warn!("duplicate positives in batch; removing them from the negatives");
    }
    let intents: Vec<Vec<f64>> = batch.entries.iter().map(|e| e.intent.clone()).collect();
    let positives: Vec<Vec<f64>> = batch.entries.iter().map(|e| e.positive.clone()).collect();
    let store = crate::numerics::ParamStore::new();
    let mut tape = Tape::new(&store);
    let u = tape.constant(Tensor::from_rows(&intents)?);
    let v = tape.constant(Tensor::from_rows(&positives)?);
    let loss = in_batch_loss(&mut tape, u, v, &items, tau, policy)?;
    Ok(tape.scalar(loss))
}
