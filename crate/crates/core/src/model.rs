//! The side network: per-layer adapters, an integrator and the sequence
//! encoder, wired according to a [`Variant`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Activation, MlpAdapter, MoeAdapter, RoutingMode};
use crate::data::{EmbeddingStore, Example};
use crate::encoder::{Dropout, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::integrator::{GruParams, IntegrationStrategy};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::objective::{in_batch_loss, DuplicatePolicy, Temperature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// MoE adapters on the top `a` layers, integrated by a GRU.
    Ssna,
    /// MoE adapters averaged.
    Mean,
    /// MoE adapters combined with learned scalar weights.
    Weighted,
    /// One MLP adapter on the top layer.
    TtMlp,
    /// One MoE adapter on the top layer.
    TtMoe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ssna,
        Variant::Mean,
        Variant::Weighted,
        Variant::TtMlp,
        Variant::TtMoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ssna => "ssna",
            Variant::Mean => "mean",
            Variant::Weighted => "weighted",
            Variant::TtMlp => "tt-mlp",
            Variant::TtMoe => "tt-moe",
        }
    }

    /// Top-tuning variants only ever see the last layer.
    pub fn is_top_tuning(self) -> bool {
        matches!(self, Variant::TtMlp | Variant::TtMoe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected ssna, mean, weighted, tt-mlp or tt-moe)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of adapted layers, counted from the top.
    pub a: usize,
    pub n_p: usize,
    pub dim: usize,
    pub d_llm: usize,
    pub mlp_layers: usize,
    pub activation: Activation,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub norm_first: bool,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            dropout: self.dropout,
            norm_first: self.norm_first,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 {
            return Err(Error::Config("a must be >= 1".into()));
        }
        if self.variant.is_top_tuning() && self.a != 1 {
            return Err(Error::Config(format!(
                "{} adapts only the top layer; a = {} is not allowed",
                self.variant, self.a
            )));
        }
        if self.n_p == 0 || self.d_llm == 0 {
            return Err(Error::Config("n_p and d_llm must be >= 1".into()));
        }
        if self.variant == Variant::TtMlp && !(1..=3).contains(&self.mlp_layers) {
            return Err(Error::Config(format!(
                "mlp_layers must be 1, 2 or 3, got {}",
                self.mlp_layers
            )));
        }
        self.encoder().validate()
    }

    /// The store must hold at least `a` layers of width `d_llm`.
    pub fn check_store(&self, store: &EmbeddingStore) -> Result<()> {
        if store.d_llm() != self.d_llm {
            return Err(Error::Config(format!(
                "model expects d_llm {}, embedding file has {}",
                self.d_llm,
                store.d_llm()
            )));
        }
        if store.layers() < self.a {
            return Err(Error::Config(format!(
                "a = {} but the embedding file stores only {} layers",
                self.a,
                store.layers()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Adapters {
    Moe(Vec<MoeAdapter>),
    Mlp(MlpAdapter),
}

/// A constructed model. Parameters live in `params`.
#[derive(Clone, Debug)]
pub struct SideNetwork {
    pub config: ModelConfig,
    pub params: ParamStore,
    adapters: Adapters,
    integrator: Option<IntegrationStrategy>,
    encoder: EncoderParams,
}

/// Per-layer routing for a forward pass.
fn layer_mode(mode: RoutingMode, layer: usize) -> RoutingMode {
    match mode {
        RoutingMode::MeanOnly => RoutingMode::MeanOnly,
        RoutingMode::Sample(s) => RoutingMode::Sample(s ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    }
}

impl SideNetwork {
    /// Parameters are initialised from a ChaCha stream keyed by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let adapters = match config.variant {
            Variant::TtMlp => Adapters::Mlp(MlpAdapter::init(
                &mut params,
                "adapter.0",
                config.d_llm,
                config.dim,
                config.mlp_layers,
                config.activation,
                &mut rng,
            )?),
            _ => Adapters::Moe(
                (0..config.a)
                    .map(|m| {
                        MoeAdapter::init(
                            &mut params,
                            &format!("adapter.{m}"),
                            config.d_llm,
                            config.dim,
                            config.n_p,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let integrator = match config.variant {
            Variant::Ssna => Some(IntegrationStrategy::Gru(GruParams::init(
                &mut params,
                "integrator",
                config.dim,
                &mut rng,
            )?)),
            Variant::Mean => Some(IntegrationStrategy::Mean),
            Variant::Weighted => Some(IntegrationStrategy::init_weighted(&mut params, "integrator", config.a)?),
            Variant::TtMlp | Variant::TtMoe => None,
        };
        let encoder = EncoderParams::init(&mut params, "encoder", &config.encoder(), &mut rng)?;
        Ok(SideNetwork {
            config,
            params,
            adapters,
            integrator,
            encoder,
        })
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    /// Adapted embeddings `v*` of `rows`, one per row, `rows.len() × dim`.
    pub fn adapted_items(
        &self,
        tape: &mut Tape<'_>,
        store: &EmbeddingStore,
        rows: &[usize],
        mode: RoutingMode,
    ) -> Result<Var> {
        self.config.check_store(store)?;
        match &self.adapters {
            Adapters::Mlp(mlp) => {
                let h = tape.constant(store.layer_matrix(rows, 0));
                mlp.forward(tape, h)
            }
            Adapters::Moe(adapters) => {
                let zs = adapters
                    .iter()
                    .enumerate()
                    .map(|(m, ad)| {
                        let h = tape.constant(store.layer_matrix(rows, m));
                        ad.forward(tape, h, layer_mode(mode, m))
                    })
                    .collect::<Result<Vec<_>>>()?;
                match &self.integrator {
                    Some(strategy) => strategy.forward(tape, &zs),
                    None => Ok(zs[0]),
                }
            }
        }
    }

    /// Adapted embeddings of the whole store (routing means, no dropout).
    pub fn catalog(&self, store: &EmbeddingStore) -> Result<Tensor> {
        const CHUNK: usize = 512;
        let mut data = Vec::with_capacity(store.len() * self.config.dim);
        let rows: Vec<usize> = (0..store.len()).collect();
        for chunk in rows.chunks(CHUNK) {
            let mut tape = Tape::new(&self.params);
            let v = self.adapted_items(&mut tape, store, chunk, RoutingMode::MeanOnly)?;
            data.extend_from_slice(tape.value(v).data());
        }
        let t = Tensor::from_vec(store.len(), self.config.dim, data)?;
        Ok(t)
    }

    /// User intent from the catalog rows of an input sequence.
    pub fn intent(&self, catalog: &Tensor, input: &[usize]) -> Result<Vec<f64>> {
        if input.is_empty() {
            return Err(Error::Empty("intent of an empty sequence".into()));
        }
        let mut rows = Vec::with_capacity(input.len() * catalog.cols());
        for &i in input {
            if i >= catalog.rows() {
                return Err(Error::Data(format!(
                    "item row {i} outside a catalog of {}",
                    catalog.rows()
                )));
            }
            rows.extend_from_slice(catalog.row(i));
        }
        let mut tape = Tape::new(&self.params);
        let seq = tape.constant(Tensor::from_vec(input.len(), catalog.cols(), rows)?);
        let u = self.encoder.encode(&mut tape, seq, None)?;
        Ok(tape.value(u).data().to_vec())
    }

    /// In-batch loss on the tape for `examples`.
    ///
    /// Each distinct item in the batch is adapted once; its row is shared by
    /// every sequence and target that mentions it. Dropout masks come from
    /// `dropout_rng` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        store: &EmbeddingStore,
        examples: &[&Example],
        mode: RoutingMode,
        mut dropout_rng: Option<&mut dyn RngCore>,
        tau: Temperature,
        policy: DuplicatePolicy,
    ) -> Result<Var> {
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut unique = Vec::new();
        let mut local = |item: usize| {
            *slot.entry(item).or_insert_with(|| {
                unique.push(item);
                unique.len() - 1
            })
        };
        let local_inputs: Vec<Vec<usize>> = examples
            .iter()
            .map(|ex| ex.input.iter().map(|&i| local(i)).collect())
            .collect();
        let local_targets: Vec<usize> = examples.iter().map(|ex| local(ex.target)).collect();
        for &i in &unique {
            if i >= store.len() {
                return Err(Error::Data(format!("item row {i} outside the embedding store")));
            }
        }
        let items = self.adapted_items(tape, store, &unique, mode)?;
        let mut intents = Vec::with_capacity(examples.len());
        for input in &local_inputs {
            let seq = tape.gather_rows(items, input)?;
            let dropout = dropout_rng.as_deref_mut().map(|rng| Dropout {
                rate: self.config.dropout,
                rng,
            });
            intents.push(self.encoder.encode(tape, seq, dropout)?);
        }
        let intents = tape.concat_rows(&intents)?;
        let positives = tape.gather_rows(items, &local_targets)?;
        let targets: Vec<usize> = examples.iter().map(|ex| ex.target).collect();
        in_batch_loss(tape, intents, positives, &targets, tau, policy)
    }

    /// Scalar loss without dropout, for checks and reporting.
    pub fn loss(
        &self,
        store: &EmbeddingStore,
        examples: &[&Example],
        mode: RoutingMode,
        tau: Temperature,
        policy: DuplicatePolicy,
    ) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let l = self.batch_loss(&mut tape, store, examples, mode, None, tau, policy)?;
        Ok(tape.scalar(l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny_config(variant: Variant, a: usize) -> ModelConfig {
        ModelConfig {
            variant,
            a,
            n_p: 3,
            dim: 8,
            d_llm: 6,
            mlp_layers: 2,
            activation: Activation::Relu,
            blocks: 1,
            heads: 2,
            dropout: 0.0,
            norm_first: true,
        }
    }

    fn store(layers: usize) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(5, layers * 6, 1.0, &mut rng);
        EmbeddingStore::new(
            (0..5).map(|i| format!("i{i}")).collect(),
            layers,
            6,
            t.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap()
    }

    fn examples() -> Vec<Example> {
        vec![
            Example {
                user: 0,
                input: vec![0, 1],
                target: 2,
            },
            Example {
                user: 1,
                input: vec![3],
                target: 4,
            },
            Example {
                user: 2,
                input: vec![4, 2, 1],
                target: 0,
            },
        ]
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("gru".parse::<Variant>().is_err());
    }

    #[test]
    fn top_tuning_rejects_deeper_adaptation() {
        assert!(SideNetwork::new(tiny_config(Variant::TtMoe, 2), 0).is_err());
        assert!(SideNetwork::new(tiny_config(Variant::TtMlp, 1), 0).is_ok());
    }

    #[test]
    fn store_must_hold_enough_layers() {
        let net = SideNetwork::new(tiny_config(Variant::Ssna, 3), 0).unwrap();
        let s = store(2);
        let mut tape = Tape::new(&net.params);
        assert!(net.adapted_items(&mut tape, &s, &[0], RoutingMode::MeanOnly).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SideNetwork::new(tiny_config(Variant::Ssna, 2), 7).unwrap();
        let b = SideNetwork::new(tiny_config(Variant::Ssna, 2), 7).unwrap();
        for (x, y) in a.params.leaves().iter().zip(b.params.leaves()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn batch_rows_match_catalog() {
        let s = store(2);
        let net = SideNetwork::new(tiny_config(Variant::Ssna, 2), 1).unwrap();
        let cat = net.catalog(&s).unwrap();
        let mut tape = Tape::new(&net.params);
        let v = net
            .adapted_items(&mut tape, &s, &[3, 1], RoutingMode::MeanOnly)
            .unwrap();
        assert_eq!(tape.value(v).row(0), cat.row(3));
        assert_eq!(tape.value(v).row(1), cat.row(1));
    }

    #[test]
    fn loss_matches_intent_and_catalog() {
        let s = store(2);
        let net = SideNetwork::new(tiny_config(Variant::Weighted, 2), 2).unwrap();
        let ex = examples();
        let refs: Vec<&Example> = ex.iter().collect();
        let tau = Temperature::default();
        let l = net
            .loss(&s, &refs, RoutingMode::MeanOnly, tau, DuplicatePolicy::Strict)
            .unwrap();
        let cat = net.catalog(&s).unwrap();
        let mut scores = Tensor::zeros(3, 3);
        for (j, e) in ex.iter().enumerate() {
            let u = net.intent(&cat, &e.input).unwrap();
            for (i, f) in ex.iter().enumerate() {
                scores.set(j, i, crate::numerics::cosine(&u, cat.row(f.target)).unwrap());
            }
        }
        let oracle = crate::objective::loss_from_scores(&scores, &[2, 4, 0], tau, DuplicatePolicy::Strict).unwrap();
        assert!((l - oracle).abs() < 1e-12, "{l} vs {oracle}");
    }

    #[test]
    fn every_variant_passes_grad_check() {
        let s = store(2);
        let ex = examples();
        let refs: Vec<&Example> = ex.iter().collect();
        for v in Variant::ALL {
            let a = if v.is_top_tuning() { 1 } else { 2 };
            let net = SideNetwork::new(tiny_config(v, a), 3).unwrap();
            let mut params = net.params.clone();
            let report = grad_check(&mut params, 1e-5, |tape| {
                net.batch_loss(
                    tape,
                    &s,
                    &refs,
                    RoutingMode::Sample(9),
                    None,
                    Temperature::default(),
                    DuplicatePolicy::Lenient,
                )
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{v}: {report:?}");
        }
    }

    #[test]
    fn dropout_changes_training_loss_only() {
        let s = store(2);
        let mut cfg = tiny_config(Variant::Ssna, 2);
        cfg.dropout = 0.5;
        let net = SideNetwork::new(cfg, 5).unwrap();
        let ex = examples();
        let refs: Vec<&Example> = ex.iter().collect();
        let tau = Temperature::default();
        let plain = net
            .loss(&s, &refs, RoutingMode::MeanOnly, tau, DuplicatePolicy::Lenient)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&net.params);
        let l = net
            .batch_loss(
                &mut tape,
                &s,
                &refs,
                RoutingMode::MeanOnly,
                Some(&mut rng),
                tau,
                DuplicatePolicy::Lenient,
            )
            .unwrap();
        assert_ne!(tape.scalar(l), plain);
    }
}
