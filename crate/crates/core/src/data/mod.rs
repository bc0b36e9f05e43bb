//! Interaction logs, frozen embeddings, the leave-last-out protocol and a
//! synthetic stand-in dataset.

pub mod embeddings;
pub mod interactions;
pub mod split;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use embeddings::{load_embeddings, save_embeddings, EmbeddingStore};
pub use interactions::{filter_min_interactions, load_interactions, truncate_recent, InteractionLog, UserHistory};
pub use split::{expand_subsequences, leave_last_out_split, Example, Split, SplitDataset, UserSplit};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::encoder::MAX_SEQ_LEN;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_user: usize,
    pub k_item: usize,
    pub max_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_user: 5,
            k_item: 5,
            max_len: MAX_SEQ_LEN,
        }
    }
}

/// Filter, truncate, resolve ids against `store`, then split.
pub fn prepare_dataset(log: &InteractionLog, store: &EmbeddingStore, cfg: &PipelineConfig) -> Result<SplitDataset> {
    if cfg.max_len == 0 || cfg.max_len > MAX_SEQ_LEN {
        return Err(Error::Config(format!("max_len must be in 1..={MAX_SEQ_LEN}")));
    }
    let filtered = filter_min_interactions(log, cfg.k_user, cfg.k_item)?;
    let mut sequences = Vec::with_capacity(filtered.len());
    for u in filtered.users {
        let recent = truncate_recent(&u.items, cfg.max_len);
        let rows = recent
            .iter()
            .map(|id| {
                store
                    .row_of(id)
                    .ok_or_else(|| Error::Data(format!("item {id} of user {} has no embedding", u.user)))
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push((u.user, rows));
    }
    leave_last_out_split(sequences)
}

/// The sequences a split was built from, as a log over `store` ids.
pub fn split_to_log(ds: &SplitDataset, store: &EmbeddingStore) -> InteractionLog {
    InteractionLog {
        users: ds
            .users
            .iter()
            .map(|u| UserHistory {
                user: u.user.clone(),
                items: u.sequence().iter().map(|&r| store.id(r).to_string()).collect(),
            })
            .collect(),
    }
}

/// Dataset size summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub sparsity: f64,
}

impl LogStats {
    pub fn of(log: &InteractionLog) -> Self {
        let users = log.len();
        let items = log
            .users
            .iter()
            .flat_map(|u| u.items.iter())
            .collect::<HashSet<_>>()
            .len();
        let interactions = log.interaction_count();
        LogStats {
            users,
            items,
            interactions,
            avg_len: interactions as f64 / users.max(1) as f64,
            sparsity: 1.0 - interactions as f64 / (users * items).max(1) as f64,
        }
    }
}

impl fmt::Display for LogStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#users {}  #items {}  #inters {}  avg.len {:.2}  sparsity {:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.avg_len,
            100.0 * self.sparsity
        )
    }
}
