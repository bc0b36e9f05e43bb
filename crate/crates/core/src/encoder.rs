//! Causal self-attention sequence encoder producing the user-intent vector.
//!
//! Learned positional embeddings are added to the adapted item embeddings and
//! the result runs through `blocks` transformer blocks (pre- or post-norm).
//! Sequences run at their true length; there is no padding.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Longest sequence the positional table covers.
pub const MAX_SEQ_LEN: usize = 50;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub norm_first: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 256,
            blocks: 2,
            heads: 2,
            max_len: MAX_SEQ_LEN,
            dropout: 0.2,
            norm_first: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 || self.max_len > MAX_SEQ_LEN {
            return Err(Error::Config(format!("max_len {} outside 1..=50", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(fan_in, fan_out, std, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let scaled = tape.mul_row(n, g)?;
        tape.add_row(scaled, b)
    }
}

/// Query/key/value projections for all heads (heads are column blocks) plus
/// the output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    dim: usize,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(AttentionParams {
            query: Linear::init(store, &format!("{prefix}.q"), dim, dim, rng)?,
            key: Linear::init(store, &format!("{prefix}.k"), dim, dim, rng)?,
            value: Linear::init(store, &format!("{prefix}.v"), dim, dim, rng)?,
            output: Linear::init(store, &format!("{prefix}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Returns the block output and the per-head attention matrices.
    pub fn forward_with_weights(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        if tape.shape(x).1 != self.dim {
            return Err(shape_err(format!(
                "attention expects width {}, got {}",
                self.dim,
                tape.shape(x).1
            )));
        }
        if tape.shape(x).0 == 0 {
            return Err(Error::Empty("attention over an empty sequence".into()));
        }
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores, true)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((self.output.forward(tape, joined)?, weights))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, x)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Dropout source for training passes.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(Tensor::from_vec(r, c, mask)?);
        tape.mul(x, m)
    }
}

fn maybe_dropout(drop: &mut Option<Dropout<'_>>, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    match drop {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
    pub config: EncoderConfig,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let positions = store.add(
            format!("{prefix}.pos"),
            Tensor::randn(config.max_len, d, 1.0 / (d as f64).sqrt(), rng),
        )?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let p = format!("{prefix}.block.{b}");
            blocks.push(BlockParams {
                attention: AttentionParams::init(store, &format!("{p}.attn"), d, config.heads, rng)?,
                norm1: LayerNorm::init(store, &format!("{p}.ln1"), d)?,
                norm2: LayerNorm::init(store, &format!("{p}.ln2"), d)?,
                ffn_in: Linear::init(store, &format!("{p}.ffn1"), d, d, rng)?,
                ffn_out: Linear::init(store, &format!("{p}.ffn2"), d, d, rng)?,
            });
        }
        Ok(EncoderParams {
            positions,
            blocks,
            config: config.clone(),
        })
    }

    fn ffn(block: &BlockParams, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = block.ffn_in.forward(tape, x)?;
        let h = tape.relu(h);
        block.ffn_out.forward(tape, h)
    }

    /// Representations at every position, `t × d`. Dropout only when given.
    pub fn forward_all(&self, tape: &mut Tape<'_>, items: Var, mut dropout: Option<Dropout<'_>>) -> Result<Var> {
        let (t, d) = tape.shape(items);
        if t == 0 {
            return Err(Error::Empty("sequence of length 0".into()));
        }
        if t > self.config.max_len {
            return Err(shape_err(format!(
                "sequence length {t} exceeds {}",
                self.config.max_len
            )));
        }
        if d != self.config.dim {
            return Err(shape_err(format!("encoder expects width {}, got {d}", self.config.dim)));
        }
        let pos_table = tape.param(self.positions);
        let idx: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(pos_table, &idx)?;
        let mut x = tape.add(items, pos)?;
        x = maybe_dropout(&mut dropout, tape, x)?;
        for block in &self.blocks {
            if self.config.norm_first {
                let y = block.norm1.forward(tape, x)?;
                let a = block.attention.forward(tape, y)?;
                let a = maybe_dropout(&mut dropout, tape, a)?;
                x = tape.add(x, a)?;
                let y = block.norm2.forward(tape, x)?;
                let f = Self::ffn(block, tape, y)?;
                let f = maybe_dropout(&mut dropout, tape, f)?;
                x = tape.add(x, f)?;
            } else {
                let a = block.attention.forward(tape, x)?;
                let a = maybe_dropout(&mut dropout, tape, a)?;
                let s = tape.add(x, a)?;
                x = block.norm1.forward(tape, s)?;
                let f = Self::ffn(block, tape, x)?;
                let f = maybe_dropout(&mut dropout, tape, f)?;
                let s = tape.add(x, f)?;
                x = block.norm2.forward(tape, s)?;
            }
        }
        Ok(x)
    }

    /// The representation at the last position, `1 × d`.
    pub fn encode(&self, tape: &mut Tape<'_>, items: Var, dropout: Option<Dropout<'_>>) -> Result<Var> {
        let all = self.forward_all(tape, items, dropout)?;
        let t = tape.shape(all).0;
        tape.gather_rows(all, &[t - 1])
    }
}

/// User intent for a `t × d` matrix of adapted embeddings.
pub fn encode_sequence(
    items: &Tensor,
    params: &EncoderParams,
    store: &ParamStore,
    dropout: Option<Dropout<'_>>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let m = tape.constant(items.clone());
    let u = params.encode(&mut tape, m, dropout)?;
    Ok(tape.value(u).data().to_vec())
}

/// Output of one attention sublayer (no dropout) and its per-head weights.
pub fn causal_attention(x: &Tensor, params: &AttentionParams, store: &ParamStore) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let (out, weights) = params.forward_with_weights(&mut tape, xv)?;
    let weights = weights.iter().map(|&w| tape.value(w).clone()).collect();
    Ok((tape.value(out).clone(), weights))
}
