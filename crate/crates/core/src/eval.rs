//! Full-catalog ranking and single-target Recall@k / NDCG@k.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::SideNetwork;
use crate::numerics::{Tensor, COSINE_EPS};

/// Row-normalised copy of an adapted catalog, ready for cosine scoring.
#[derive(Clone, Debug)]
pub struct Catalog {
    unit: Tensor,
    raw: Tensor,
}

impl Catalog {
    pub fn new(raw: Tensor) -> Result<Self> {
        if raw.rows() == 0 {
            return Err(Error::Empty("catalog".into()));
        }
        let mut unit = raw.clone();
        for i in 0..unit.rows() {
            let row = unit.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= COSINE_EPS {
                return Err(Error::ZeroNorm(format!("catalog item {i}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Catalog { unit, raw })
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    /// Adapted embeddings as produced by the model.
    pub fn embeddings(&self) -> &Tensor {
        &self.raw
    }

    /// Cosine score of `u` against every item.
    pub fn scores(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.unit.cols() {
            return Err(Error::Shape(format!(
                "intent of width {} against catalog width {}",
                u.len(),
                self.unit.cols()
            )));
        }
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite("intent".into()));
        }
        if n <= COSINE_EPS {
            return Err(Error::ZeroNorm("intent".into()));
        }
        Ok((0..self.unit.rows())
            .map(|i| {
                let dot: f64 = self.unit.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
                (dot / n).clamp(-1.0, 1.0)
            })
            .collect())
    }
}

/// Item indices by descending score, ties by ascending index.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn rank_items(u: &[f64], catalog: &Catalog) -> Result<Vec<usize>> {
    Ok(rank_by_scores(&catalog.scores(u)?))
}

/// 1-based position of `target` in `ranked`.
pub fn target_rank(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

/// 1-based rank `target` would get from [`rank_by_scores`], without sorting.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, s)| s.total_cmp(&st).is_gt() || (i < target && s.total_cmp(&st).is_eq()))
        .count()
}

pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    recall_from_rank(target_rank(ranked, target), k)
}

pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    ndcg_from_rank(target_rank(ranked, target), k)
}

pub fn recall_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Drop the user's earlier items (other than the target) from the ranking.
    pub exclude_history: bool,
}

/// Target rank for every example, in input order.
pub fn target_ranks(
    model: &SideNetwork,
    catalog: &Catalog,
    examples: &[&Example],
    opts: EvalOptions,
) -> Result<Vec<usize>> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    examples
        .par_iter()
        .map(|ex| {
            if ex.target >= catalog.len() {
                return Err(Error::Data(format!("target row {} outside the catalog", ex.target)));
            }
            let u = model.intent(catalog.embeddings(), &ex.input)?;
            let mut scores = catalog.scores(&u)?;
            if opts.exclude_history {
                for &i in &ex.input {
                    if i != ex.target {
                        scores[i] = f64::NEG_INFINITY;
                    }
                }
            }
            Ok(rank_of(&scores, ex.target))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub users: usize,
    #[serde(rename = "R@10")]
    pub recall_10: f64,
    #[serde(rename = "R@50")]
    pub recall_50: f64,
    #[serde(rename = "N@10")]
    pub ndcg_10: f64,
    #[serde(rename = "N@50")]
    pub ndcg_50: f64,
    /// Mean training seconds per epoch, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_seconds: Option<f64>,
}

/// Mean of a per-user metric, summed in user order.
fn mean(ranks: &[usize], f: impl Fn(Option<usize>) -> f64) -> f64 {
    ranks.iter().map(|&r| f(Some(r))).sum::<f64>() / ranks.len() as f64
}

pub fn recall_mean(ranks: &[usize], k: usize) -> f64 {
    mean(ranks, |r| recall_from_rank(r, k))
}

pub fn ndcg_mean(ranks: &[usize], k: usize) -> f64 {
    mean(ranks, |r| ndcg_from_rank(r, k))
}

impl MetricsReport {
    pub fn from_ranks(split: &str, ranks: &[usize]) -> Self {
        MetricsReport {
            split: split.to_string(),
            users: ranks.len(),
            recall_10: recall_mean(ranks, 10),
            recall_50: recall_mean(ranks, 50),
            ndcg_10: ndcg_mean(ranks, 10),
            ndcg_50: ndcg_mean(ranks, 50),
            epoch_seconds: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain fields serialize")
    }

    pub fn table(reports: &[MetricsReport]) -> String {
        let mut out = format!(
            "{:<8} {:>7} {:>8} {:>8} {:>8} {:>8}",
            "split", "users", "R@10", "R@50", "N@10", "N@50"
        );
        for r in reports {
            out.push('\n');
            out.push_str(&r.to_string());
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.split, self.users, self.recall_10, self.recall_50, self.ndcg_10, self.ndcg_50
        )
    }
}

/// Ranks `examples` against the model's full catalog.
pub fn evaluate(
    model: &SideNetwork,
    catalog: &Catalog,
    split: &str,
    examples: &[&Example],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let ranks = target_ranks(model, catalog, examples, opts)?;
    Ok(MetricsReport::from_ranks(split, &ranks))
}
