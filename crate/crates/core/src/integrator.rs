//! Folding the `a` adapter outputs of an item into one embedding.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GateParams {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
}

/// Reset, update and candidate gates of a width-`d` GRU.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub reset: GateParams,
    pub update: GateParams,
    pub candidate: GateParams,
    dim: usize,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let mut gate = |name: &str| -> Result<GateParams> {
            Ok(GateParams {
                input: store.add(format!("{prefix}.W_{name}"), Tensor::randn(dim, dim, std, rng))?,
                hidden: store.add(format!("{prefix}.U_{name}"), Tensor::randn(dim, dim, std, rng))?,
                bias: store.add(format!("{prefix}.b_{name}"), Tensor::zeros(1, dim))?,
            })
        };
        Ok(GruParams {
            reset: gate("r")?,
            update: gate("z")?,
            candidate: gate("h")?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn gate_pre(&self, tape: &mut Tape<'_>, gate: &GateParams, x: Var, h: Var) -> Result<Var> {
        let w = tape.param(gate.input);
        let u = tape.param(gate.hidden);
        let b = tape.param(gate.bias);
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, b)
    }

    /// One step over every row: `(1 - z) ⊙ h + z ⊙ h̃`.
    pub fn step(&self, tape: &mut Tape<'_>, h_prev: Var, x: Var) -> Result<Var> {
        if tape.shape(x).1 != self.dim || tape.shape(h_prev) != tape.shape(x) {
            return Err(shape_err(format!(
                "gru step: state {:?}, input {:?}, width {}",
                tape.shape(h_prev),
                tape.shape(x),
                self.dim
            )));
        }
        let r_pre = self.gate_pre(tape, &self.reset, x, h_prev)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = self.gate_pre(tape, &self.update, x, h_prev)?;
        let z = tape.sigmoid(z_pre);
        let rh = tape.mul(r, h_prev)?;
        let c_pre = self.gate_pre(tape, &self.candidate, x, rh)?;
        let candidate = tape.tanh(c_pre);
        let delta = tape.sub(candidate, h_prev)?;
        let gated = tape.mul(z, delta)?;
        tape.add(h_prev, gated)
    }
}

pub fn gru_cell(h_prev: &[f64], x: &[f64], p: &GruParams, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let h = tape.constant(Tensor::row_vector(h_prev)?);
    let x = tape.constant(Tensor::row_vector(x)?);
    let y = p.step(&mut tape, h, x)?;
    Ok(tape.value(y).data().to_vec())
}

#[derive(Clone, Debug)]
pub enum IntegrationStrategy {
    Gru(GruParams),
    Mean,
    /// Free per-adapter weights, stored as a `1 × a` parameter.
    Weighted(ParamId),
}

impl IntegrationStrategy {
    pub fn init_weighted(store: &mut ParamStore, prefix: &str, a: usize) -> Result<Self> {
        if a == 0 {
            return Err(Error::Empty("weighted integration over zero adapters".into()));
        }
        let id = store.add(format!("{prefix}.w"), Tensor::filled(1, a, 1.0 / a as f64))?;
        Ok(IntegrationStrategy::Weighted(id))
    }

    /// Combines `zs` (top layer first); every element has the same shape.
    pub fn forward(&self, tape: &mut Tape<'_>, zs: &[Var]) -> Result<Var> {
        let first = *zs.first().ok_or_else(|| Error::Empty("integrate".into()))?;
        let shape = tape.shape(first);
        if zs.iter().any(|&z| tape.shape(z) != shape) {
            return Err(shape_err("integrate: adapter outputs differ in shape"));
        }
        match self {
            IntegrationStrategy::Gru(p) => {
                let mut h = tape.constant(Tensor::zeros(shape.0, shape.1));
                for &z in zs {
                    h = p.step(tape, h, z)?;
                }
                Ok(h)
            }
            IntegrationStrategy::Mean => {
                let mut acc = first;
                for &z in &zs[1..] {
                    acc = tape.add(acc, z)?;
                }
                Ok(tape.scale(acc, 1.0 / zs.len() as f64))
            }
            IntegrationStrategy::Weighted(id) => {
                let w = tape.param(*id);
                if tape.shape(w).1 != zs.len() {
                    return Err(shape_err(format!(
                        "{} weights for {} adapters",
                        tape.shape(w).1,
                        zs.len()
                    )));
                }
                // broadcast the single weight row to every item row
                let w_rows = tape.gather_rows(w, &vec![0; shape.0])?;
                let mut acc: Option<Var> = None;
                for (m, &z) in zs.iter().enumerate() {
                    let term = tape.scale_by_col(z, w_rows, m)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                Ok(acc.expect("non-empty"))
            }
        }
    }
}

pub fn integrate(zs: &[Vec<f64>], strategy: &IntegrationStrategy, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let vars = zs
        .iter()
        .map(|z| Ok(tape.constant(Tensor::row_vector(z)?)))
        .collect::<Result<Vec<_>>>()?;
    let y = strategy.forward(&mut tape, &vars)?;
    Ok(tape.value(y).data().to_vec())
}
