//! Run configuration: JSON files, named presets and CLI overrides.
//!
//! Values are layered `defaults < preset < file < command line`. Every field
//! of [`RunConfig`] is optional so that the same type describes each layer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::Activation;
use crate::data::PipelineConfig;
use crate::encoder::{EncoderConfig, MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub accumulation_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub clip_norm: Option<f64>,
    pub exclude_history: Option<bool>,
}

impl TrainOverrides {
    fn merge(&mut self, o: &TrainOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if o.$f.is_some() { self.$f = o.$f; } )* };
        }
        take!(
            learning_rate,
            batch_size,
            accumulation_steps,
            epochs,
            tau,
            seed,
            clip_norm,
            exclude_history
        );
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub interactions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub a: Option<usize>,
    pub n_p: Option<usize>,
    pub dim: Option<usize>,
    pub mlp_layers: Option<usize>,
    pub activation: Option<Activation>,
    pub blocks: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub norm_first: Option<bool>,
    pub k_user: Option<usize>,
    pub k_item: Option<usize>,
    pub max_len: Option<usize>,
    #[serde(default)]
    pub train: TrainOverrides,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.interactions, &mut cfg.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Copies every field set in `o` over `self`.
    pub fn merge(&mut self, o: &RunConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $( if o.$f.is_some() { self.$f = o.$f.clone(); } )* };
        }
        take!(
            preset,
            interactions,
            embeddings,
            variant,
            a,
            n_p,
            dim,
            mlp_layers,
            activation,
            blocks,
            heads,
            dropout,
            norm_first,
            k_user,
            k_item,
            max_len
        );
        self.train.merge(&o.train);
    }

    /// Layers `self` (the file) and `cli` over the defaults and the preset
    /// named by either of them.
    pub fn resolve(&self, cli: &RunConfig) -> Result<Resolved> {
        let variant = cli.variant.or(self.variant).unwrap_or(Variant::Ssna);
        let preset_name = cli.preset.as_ref().or(self.preset.as_ref());
        let mut merged = match preset_name {
            Some(name) => Preset::named(name)?.layer(variant),
            None => RunConfig::default(),
        };
        merged.merge(self);
        merged.merge(cli);
        merged.variant = Some(variant);

        // An explicit `a` at or above the layer that chose a top-tuning
        // variant conflicts with it. Lower layers are overridden.
        let from_cli = cli.variant.is_some();
        let a_conflict = if from_cli { cli.a } else { cli.a.or(self.a) };
        if variant.is_top_tuning() {
            match a_conflict {
                Some(a) if a != 1 => {
                    return Err(Error::Config(format!(
                        "{variant} adapts only the top layer; a = {a} is not allowed"
                    )))
                }
                _ => merged.a = Some(1),
            }
        }

        let enc = EncoderConfig::default();
        let base_train = TrainConfig::default();
        let t = &merged.train;
        let train = TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(base_train.learning_rate),
            batch_size: t.batch_size.unwrap_or(base_train.batch_size),
            accumulation_steps: t.accumulation_steps.unwrap_or(base_train.accumulation_steps),
            epochs: t.epochs.unwrap_or(base_train.epochs),
            tau: t.tau.unwrap_or(base_train.tau),
            seed: t.seed.unwrap_or(base_train.seed),
            clip_norm: t.clip_norm.or(base_train.clip_norm),
            exclude_history: t.exclude_history.unwrap_or(base_train.exclude_history),
        };
        train.validate()?;
        let base_pipe = PipelineConfig::default();
        let pipeline = PipelineConfig {
            k_user: merged.k_user.unwrap_or(base_pipe.k_user),
            k_item: merged.k_item.unwrap_or(base_pipe.k_item),
            max_len: merged.max_len.unwrap_or(base_pipe.max_len),
        };
        if pipeline.max_len == 0 || pipeline.max_len > MAX_SEQ_LEN {
            return Err(Error::Config(format!(
                "max_len must be in 1..={MAX_SEQ_LEN}, got {}",
                pipeline.max_len
            )));
        }
        let model = ModelSettings {
            variant,
            a: merged.a.unwrap_or(2),
            n_p: merged.n_p.unwrap_or(8),
            dim: merged.dim.unwrap_or(enc.dim),
            mlp_layers: merged.mlp_layers.unwrap_or(2),
            activation: merged.activation.unwrap_or_default(),
            blocks: merged.blocks.unwrap_or(enc.blocks),
            heads: merged.heads.unwrap_or(enc.heads),
            dropout: merged.dropout.unwrap_or(enc.dropout),
            norm_first: merged.norm_first.unwrap_or(enc.norm_first),
        };
        // d_llm is a placeholder until the store is known.
        model.with_d_llm(1).validate()?;
        Ok(Resolved {
            interactions: merged.interactions,
            embeddings: merged.embeddings,
            model,
            train,
            pipeline,
        })
    }
}

/// Model hyper-parameters before the embedding width is known.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSettings {
    pub variant: Variant,
    pub a: usize,
    pub n_p: usize,
    pub dim: usize,
    pub mlp_layers: usize,
    pub activation: Activation,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub norm_first: bool,
}

impl ModelSettings {
    pub fn with_d_llm(&self, d_llm: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            a: self.a,
            n_p: self.n_p,
            dim: self.dim,
            d_llm,
            mlp_layers: self.mlp_layers,
            activation: self.activation,
            blocks: self.blocks,
            heads: self.heads,
            dropout: self.dropout,
            norm_first: self.norm_first,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub interactions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

/// Best-performing hyper-parameters for one (encoder, dataset) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    /// Batch size and adapted-layer count of the SSNA family.
    pub ssna: (usize, usize),
    /// Batch size and MLP depth of TT-MLP.
    pub tt_mlp: (usize, usize),
    pub tt_moe_batch: usize,
    /// Minimum interactions per user and per item.
    pub k_core: usize,
}

const fn p(
    name: &'static str,
    tt_mlp: (usize, usize),
    tt_moe_batch: usize,
    ssna: (usize, usize),
    k_core: usize,
) -> Preset {
    Preset {
        name,
        ssna,
        tt_mlp,
        tt_moe_batch,
        k_core,
    }
}

pub const PRESETS: [Preset; 15] = [
    p("distilbert-sci", (256, 3), 128, (256, 3), 5),
    p("distilbert-pantry", (256, 2), 128, (256, 2), 5),
    p("distilbert-tools", (256, 3), 256, (256, 3), 11),
    p("distilbert-toys", (256, 3), 256, (256, 2), 10),
    p("distilbert-ins", (256, 2), 256, (256, 2), 5),
    p("distilroberta-sci", (256, 3), 128, (64, 3), 5),
    p("distilroberta-pantry", (256, 1), 256, (256, 2), 5),
    p("distilroberta-tools", (128, 3), 64, (256, 3), 11),
    p("distilroberta-toys", (256, 3), 256, (256, 2), 10),
    p("distilroberta-ins", (256, 2), 256, (256, 2), 5),
    p("bert-medium-sci", (256, 3), 64, (256, 2), 5),
    p("bert-medium-pantry", (256, 3), 256, (256, 2), 5),
    p("bert-medium-tools", (256, 3), 64, (256, 3), 11),
    p("bert-medium-toys", (256, 3), 256, (256, 2), 10),
    p("bert-medium-ins", (256, 3), 256, (256, 2), 5),
];

impl Preset {
    pub fn named(name: &str) -> Result<Preset> {
        PRESETS.iter().find(|p| p.name == name).copied().ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            Error::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
        })
    }

    /// The preset as a config layer for `variant`.
    pub fn layer(&self, variant: Variant) -> RunConfig {
        let mut cfg = RunConfig {
            k_user: Some(self.k_core),
            k_item: Some(self.k_core),
            ..RunConfig::default()
        };
        let batch = match variant {
            Variant::Ssna | Variant::Mean | Variant::Weighted => {
                cfg.a = Some(self.ssna.1);
                self.ssna.0
            }
            Variant::TtMlp => {
                cfg.mlp_layers = Some(self.tt_mlp.1);
                self.tt_mlp.0
            }
            Variant::TtMoe => self.tt_moe_batch,
        };
        cfg.train.batch_size = Some(batch);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli_variant(v: Variant) -> RunConfig {
        RunConfig {
            variant: Some(v),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_match_the_tuned_values() {
        let r = RunConfig::default().resolve(&RunConfig::default()).unwrap();
        assert_eq!(r.train, TrainConfig::default());
        assert_eq!(
            (r.model.a, r.model.n_p, r.model.dim, r.model.blocks, r.model.heads),
            (2, 8, 256, 2, 2)
        );
        assert_eq!(r.pipeline, PipelineConfig::default());
    }

    #[test]
    fn layering_order() {
        let file = RunConfig::from_json(
            r#"{"preset": "distilroberta-sci", "a": 2, "train": {"learning_rate": 1e-3, "seed": 4}}"#,
            "f",
        )
        .unwrap();
        let r = file.resolve(&RunConfig::default()).unwrap();
        // batch from the preset, a from the file
        assert_eq!(
            (r.train.batch_size, r.model.a, r.train.learning_rate, r.train.seed),
            (64, 2, 1e-3, 4)
        );
        let cli = RunConfig {
            a: Some(3),
            train: TrainOverrides {
                seed: Some(9),
                ..TrainOverrides::default()
            },
            ..RunConfig::default()
        };
        let r = file.resolve(&cli).unwrap();
        assert_eq!((r.model.a, r.train.seed, r.train.learning_rate), (3, 9, 1e-3));
    }

    #[test]
    fn presets_follow_the_variant() {
        let file = RunConfig {
            preset: Some("distilroberta-tools".into()),
            ..RunConfig::default()
        };
        let r = file.resolve(&RunConfig::default()).unwrap();
        assert_eq!((r.train.batch_size, r.model.a, r.pipeline.k_user), (256, 3, 11));
        let r = file.resolve(&cli_variant(Variant::TtMlp)).unwrap();
        assert_eq!((r.train.batch_size, r.model.mlp_layers, r.model.a), (128, 3, 1));
        let r = file.resolve(&cli_variant(Variant::TtMoe)).unwrap();
        assert_eq!((r.train.batch_size, r.model.a), (64, 1));
        assert_eq!(PRESETS.iter().filter(|p| p.k_core == 5).count(), 9);
        assert!(Preset::named("gpt-sci").is_err());
    }

    #[test]
    fn top_tuning_forces_one_layer() {
        let r = RunConfig::default().resolve(&cli_variant(Variant::TtMoe)).unwrap();
        assert_eq!(r.model.a, 1);
        // a from the file is overridden by a variant chosen on the command line
        let file = RunConfig {
            a: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(file.resolve(&cli_variant(Variant::TtMlp)).unwrap().model.a, 1);
        let cli = RunConfig {
            a: Some(3),
            ..cli_variant(Variant::TtMlp)
        };
        assert!(matches!(RunConfig::default().resolve(&cli), Err(Error::Config(_))));
        let file = RunConfig {
            variant: Some(Variant::TtMoe),
            a: Some(2),
            ..RunConfig::default()
        };
        assert!(file.resolve(&RunConfig::default()).is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"lr": 1}"#, "f").is_err());
        assert!(RunConfig::from_json(r#"{"train": {"momentum": 0.9}}"#, "f").is_err());
        assert!(RunConfig::from_json(r#"{"variant": "moe"}"#, "f").is_err());
        let bad = RunConfig::from_json(r#"{"max_len": 51}"#, "f").unwrap();
        assert!(bad.resolve(&RunConfig::default()).is_err());
        let bad = RunConfig::from_json(r#"{"train": {"batch_size": 1}}"#, "f").unwrap();
        assert!(bad.resolve(&RunConfig::default()).is_err());
    }

    #[test]
    fn paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"interactions": "log.jsonl", "embeddings": "/abs/e.ssnaemb"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.interactions.unwrap(), dir.path().join("log.jsonl"));
        assert_eq!(cfg.embeddings.unwrap(), PathBuf::from("/abs/e.ssnaemb"));
    }
}
