use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingStore;
use super::interactions::{InteractionLog, UserHistory};
use crate::encoder::MAX_SEQ_LEN;
use crate::error::{Error, Result};

/// Parameters of the clustered random-walk generator.
///
/// Items are assigned to clusters round-robin. Every cluster arranges its
/// items in a random cycle; a user walks that cycle from a random start in
/// a preferred cluster, occasionally resampling within the cluster or
/// jumping anywhere. Layer `m` of an item's embedding is its cluster
/// centroid plus a per-(layer, cluster) offset plus uniform detail noise of
/// radius `detail * (1 + m * detail_growth)`, so deeper layers carry more
/// item-specific signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub d_llm: usize,
    pub layers: usize,
    pub clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default = "default_follow")]
    pub follow: f64,
    #[serde(default = "default_jump")]
    pub jump: f64,
    #[serde(default = "default_layer_offset")]
    pub layer_offset: f64,
    #[serde(default = "default_detail")]
    pub detail: f64,
    #[serde(default = "default_detail_growth")]
    pub detail_growth: f64,
}

fn default_follow() -> f64 {
    0.8
}
fn default_jump() -> f64 {
    0.05
}
fn default_layer_offset() -> f64 {
    0.25
}
fn default_detail() -> f64 {
    0.1
}
fn default_detail_growth() -> f64 {
    2.0
}

impl SyntheticSpec {
    pub fn new(users: usize, items: usize, clusters: usize, seed: u64) -> Self {
        SyntheticSpec {
            users,
            items,
            d_llm: 16,
            layers: 2,
            clusters,
            min_len: 5,
            max_len: 20,
            seed,
            follow: default_follow(),
            jump: default_jump(),
            layer_offset: default_layer_offset(),
            detail: default_detail(),
            detail_growth: default_detail_growth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.users == 0 || self.items == 0 || self.d_llm == 0 || self.layers == 0 || self.clusters == 0 {
            return fail("synthetic users, items, d_llm, layers and clusters must be positive".into());
        }
        if self.clusters > self.items {
            return fail(format!("{} clusters for {} items", self.clusters, self.items));
        }
        if self.min_len < 3 || self.max_len > MAX_SEQ_LEN || self.min_len > self.max_len {
            return fail(format!(
                "sequence length range [{}, {}] must lie within [3, {MAX_SEQ_LEN}]",
                self.min_len, self.max_len
            ));
        }
        for (name, p) in [("follow", self.follow), ("jump", self.jump)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        if self.follow + self.jump > 1.0 {
            return fail("follow + jump probabilities exceed 1".into());
        }
        for (name, v) in [
            ("layer_offset", self.layer_offset),
            ("detail", self.detail),
            ("detail_growth", self.detail_growth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Detail noise radius of layer `m` (0 = top).
    pub fn detail_radius(&self, m: usize) -> f64 {
        self.detail * (1.0 + m as f64 * self.detail_growth)
    }
}

pub fn item_id(row: usize) -> String {
    format!("item{row}")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionLog, EmbeddingStore)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cluster_of = |i: usize| i % spec.clusters;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.clusters];
    for i in 0..spec.items {
        members[cluster_of(i)].push(i);
    }
    let mut successor = vec![0; spec.items];
    for m in &mut members {
        m.shuffle(&mut rng);
        for (k, &i) in m.iter().enumerate() {
            successor[i] = m[(k + 1) % m.len()];
        }
    }

    let mut users = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let home = &members[rng.random_range(0..spec.clusters)];
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = home[rng.random_range(0..home.len())];
        let mut items = Vec::with_capacity(len);
        items.push(item_id(cur));
        while items.len() < len {
            let r: f64 = rng.random();
            cur = if r < spec.follow {
                successor[cur]
            } else if r < spec.follow + spec.jump {
                rng.random_range(0..spec.items)
            } else {
                home[rng.random_range(0..home.len())]
            };
            items.push(item_id(cur));
        }
        users.push(UserHistory {
            user: format!("user{u}"),
            items,
        });
    }
    // embeddings draw from their own streams so the walks do not depend on
    // the layer count, and the top layers of a deeper store match a shallower one
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k + 1);
        r
    };
    let gauss = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                std * z
            })
            .collect()
    };
    let mut base = stream(0);
    let centroids: Vec<Vec<f64>> = (0..spec.clusters).map(|_| gauss(&mut base, spec.d_llm, 1.0)).collect();
    let mut data = vec![0f32; spec.items * spec.layers * spec.d_llm];
    for m in 0..spec.layers {
        let mut rng = stream(1 + m as u64);
        let offsets: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|_| gauss(&mut rng, spec.d_llm, spec.layer_offset))
            .collect();
        let r = spec.detail_radius(m);
        for i in 0..spec.items {
            let c = cluster_of(i);
            let start = (i * spec.layers + m) * spec.d_llm;
            for (j, slot) in data[start..start + spec.d_llm].iter_mut().enumerate() {
                let noise = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
                *slot = (centroids[c][j] + offsets[c][j] + noise) as f32;
            }
        }
    }
    let store = EmbeddingStore::new((0..spec.items).map(item_id).collect(), spec.layers, spec.d_llm, data)?;
    Ok((InteractionLog { users }, store))
}
