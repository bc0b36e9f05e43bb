//! Per-layer adapters over frozen LLM embeddings.
//!
//! [`MoeAdapter`] holds `n_p` whitening heads `(h - b_k) W_k` mixed by
//! softmax weights over Gaussian logits `α ~ N(h B, diag(softplus(h U))²)`.
//! [`MlpAdapter`] is the plain feed-forward adapter of the top-tuning
//! baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// How routing logits are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// `α = μ + σ ⊙ ε`, with `ε` drawn from a ChaCha stream seeded by the id.
    Sample(u64),
    /// `α = μ`.
    MeanOnly,
}

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub shift: ParamId,
    pub projection: ParamId,
}

#[derive(Clone, Debug)]
pub struct MoeAdapter {
    pub heads: Vec<ProjectionHead>,
    pub route_mean: ParamId,
    pub route_std: ParamId,
    d_llm: usize,
    dim: usize,
}

impl MoeAdapter {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_llm: usize,
        dim: usize,
        n_p: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_p == 0 || d_llm == 0 || dim == 0 {
            return Err(shape_err("adapter needs n_p, d_llm and dim >= 1"));
        }
        let std = 1.0 / (d_llm as f64).sqrt();
        let mut heads = Vec::with_capacity(n_p);
        for k in 0..n_p {
            let shift = store.add(format!("{prefix}.head.{k}.b"), Tensor::zeros(1, d_llm))?;
            let projection = store.add(format!("{prefix}.head.{k}.W"), Tensor::randn(d_llm, dim, std, rng))?;
            heads.push(ProjectionHead { shift, projection });
        }
        let route_mean = store.add(format!("{prefix}.B"), Tensor::randn(d_llm, n_p, std, rng))?;
        let route_std = store.add(format!("{prefix}.U"), Tensor::randn(d_llm, n_p, std, rng))?;
        Ok(MoeAdapter {
            heads,
            route_mean,
            route_std,
            d_llm,
            dim,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_llm(&self) -> usize {
        self.d_llm
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_input(&self, tape: &Tape<'_>, h: Var) -> Result<()> {
        if tape.shape(h).1 != self.d_llm {
            return Err(shape_err(format!(
                "adapter expects width {}, got {}",
                self.d_llm,
                tape.shape(h).1
            )));
        }
        Ok(())
    }

    /// `(h - b_k) W_k` for every row of `h`.
    pub fn project(&self, tape: &mut Tape<'_>, h: Var, head: usize) -> Result<Var> {
        self.check_input(tape, h)?;
        let head = &self.heads[head];
        let b = tape.param(head.shift);
        let w = tape.param(head.projection);
        let centered = tape.sub_row(h, b)?;
        tape.matmul(centered, w)
    }

    /// Routing weights, one probability row per input row.
    pub fn routing(&self, tape: &mut Tape<'_>, h: Var, mode: RoutingMode) -> Result<Var> {
        self.check_input(tape, h)?;
        let b = tape.param(self.route_mean);
        let mean = tape.matmul(h, b)?;
        let logits = match mode {
            RoutingMode::MeanOnly => mean,
            RoutingMode::Sample(stream) => {
                let u = tape.param(self.route_std);
                let pre = tape.matmul(h, u)?;
                let std = tape.softplus(pre);
                let (rows, cols) = tape.shape(std);
                let noise = tape.constant(standard_normal(rows, cols, stream));
                let scaled = tape.mul(std, noise)?;
                tape.add(mean, scaled)?
            }
        };
        tape.softmax_rows(logits, false)
    }

    /// `z = Σ_k route_k · e_k`, row by row.
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, mode: RoutingMode) -> Result<Var> {
        let weights = self.routing(tape, h, mode)?;
        let mut out: Option<Var> = None;
        for k in 0..self.heads.len() {
            let e = self.project(tape, h, k)?;
            let weighted = tape.scale_by_col(e, weights, k)?;
            out = Some(match out {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        Ok(out.expect("at least one head"))
    }
}

/// Noise used by [`RoutingMode::Sample`]: row-major standard normals.
pub fn standard_normal(rows: usize, cols: usize, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("finite normals")
}

fn row_input<'p>(tape: &mut Tape<'p>, h: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::row_vector(h)?))
}

/// Projection of one embedding through one head.
pub fn project_head(h: &[f64], adapter: &MoeAdapter, head: usize, store: &ParamStore) -> Result<Vec<f64>> {
    if head >= adapter.n_heads() {
        return Err(shape_err(format!("head {head} of {}", adapter.n_heads())));
    }
    let mut tape = Tape::new(store);
    let x = row_input(&mut tape, h)?;
    let y = adapter.project(&mut tape, x, head)?;
    Ok(tape.value(y).data().to_vec())
}

pub fn route_weights(h: &[f64], adapter: &MoeAdapter, store: &ParamStore, mode: RoutingMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = row_input(&mut tape, h)?;
    let y = adapter.routing(&mut tape, x, mode)?;
    Ok(tape.value(y).data().to_vec())
}

pub fn adapt(h: &[f64], adapter: &MoeAdapter, store: &ParamStore, mode: RoutingMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = row_input(&mut tape, h)?;
    let y = adapter.forward(&mut tape, x, mode)?;
    Ok(tape.value(y).data().to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct MlpLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Stack of affine layers mapping `d_llm → dim`, hidden widths `dim`.
#[derive(Clone, Debug)]
pub struct MlpAdapter {
    pub layers: Vec<MlpLayer>,
    pub activation: Activation,
    d_llm: usize,
}

impl MlpAdapter {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_llm: usize,
        dim: usize,
        n_layers: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=3).contains(&n_layers) {
            return Err(crate::Error::Config(format!(
                "MLP adapter layer count {n_layers} outside 1..=3"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut fan_in = d_llm;
        for l in 0..n_layers {
            let std = 1.0 / (fan_in as f64).sqrt();
            let weight = store.add(format!("{prefix}.mlp.{l}.weight"), Tensor::randn(fan_in, dim, std, rng))?;
            let bias = store.add(format!("{prefix}.mlp.{l}.bias"), Tensor::zeros(1, dim))?;
            layers.push(MlpLayer { weight, bias });
            fan_in = dim;
        }
        Ok(MlpAdapter {
            layers,
            activation,
            d_llm,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        if tape.shape(h).1 != self.d_llm {
            return Err(shape_err(format!(
                "MLP adapter expects width {}, got {}",
                self.d_llm,
                tape.shape(h).1
            )));
        }
        let mut x = h;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            let y = tape.matmul(x, w)?;
            x = tape.add_row(y, b)?;
            if l + 1 < self.layers.len() {
                x = match self.activation {
                    Activation::Relu => tape.relu(x),
                    Activation::Tanh => tape.tanh(x),
                };
            }
        }
        Ok(x)
    }
}

pub fn mlp_adapt(h: &[f64], mlp: &MlpAdapter, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = row_input(&mut tape, h)?;
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).data().to_vec())
}
