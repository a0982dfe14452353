//! Flat `key = value` run configuration. Every key has a default and a one-line
//! description; the CLI exposes each key as a `--key` flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synthetic::{Shape, SyntheticSpec};
use super::{
    default_ae_schedule, default_dit_schedule, format_resolutions, parse_resolutions, StageConfig,
};
use crate::autoencoder::{AeConfig, AeMode, ResidualEncoderConfig};
use crate::dit::DiTConfig;
use crate::error::{Error, Result};
use crate::featurizer::{FeaturizerConfig, FeaturizerKind};
use crate::flow::{LossConfig, LossNorm, SampleConfig};
use crate::pipeline::train::TrainOptions;

/// A documented configuration key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySpec {
    pub key: String,
    pub default: String,
    pub help: String,
}

fn spec(key: &str, default: impl ToString, help: &str) -> KeySpec {
    KeySpec {
        key: key.to_string(),
        default: default.to_string(),
        help: help.to_string(),
    }
}

fn stage_keys(s: &StageConfig) -> Vec<KeySpec> {
    let n = &s.name;
    vec![
        spec(
            &format!("{n}.anchor"),
            s.anchor_resolution,
            "nominal square side of the stage",
        ),
        spec(
            &format!("{n}.resolutions"),
            format_resolutions(&s.resolutions),
            "HxW buckets, comma separated, visited round-robin",
        ),
        spec(&format!("{n}.steps"), s.steps, "optimizer steps"),
        spec(&format!("{n}.batch"), s.batch, "samples per step"),
        spec(&format!("{n}.lr"), s.lr, "learning rate"),
        spec(
            &format!("{n}.betas"),
            format!("{},{}", s.betas.0, s.betas.1),
            "Adam betas",
        ),
        spec(
            &format!("{n}.max_text_len"),
            s.max_text_len,
            "caption token budget",
        ),
        spec(
            &format!("{n}.dataset"),
            &s.dataset_id,
            "dataset id (caption policy for diffusion stages)",
        ),
    ]
}

/// Every accepted key with its default, in documentation order.
pub fn registry() -> Vec<KeySpec> {
    let syn = SyntheticSpec::default();
    let ae = AeConfig::default();
    let dit = DiTConfig::default();
    let sample = SampleConfig::default();
    let opts = TrainOptions::default();
    let mut keys = vec![
        spec("seed", 0, "master seed"),
        spec("data", "", "corpus directory"),
        spec("ae", "", "trained autoencoder directory"),
        spec("stats", "", "latent statistics directory"),
        spec("dit", "", "trained diffusion model directory"),
        spec("resume", "", "checkpoint directory to resume from"),
        spec("n_images", syn.n_images, "images in the synthetic corpus"),
        spec("image_size", syn.width, "side of the synthetic images"),
        spec(
            "colors",
            syn.colors.join(","),
            "palette entries used by the generator",
        ),
        spec(
            "shapes",
            "circle,square,triangle",
            "shapes used by the generator",
        ),
        spec(
            "sizes",
            syn.sizes.join(","),
            "shape sizes used by the generator",
        ),
        spec(
            "backgrounds",
            syn.backgrounds.join(","),
            "backgrounds used by the generator",
        ),
        spec("featurizer", "dct", "frozen featurizer: dct or learned"),
        spec("patch", ae.featurizer.patch, "featurizer patch size"),
        spec("d_f", ae.featurizer.d_f, "featurizer channels"),
        spec(
            "ssl_steps",
            300,
            "self-supervised pretraining steps of the learned featurizer",
        ),
        spec(
            "ae_mode",
            ae.mode,
            "P (frozen features only) or R (plus residual channels)",
        ),
        spec(
            "extra_channels",
            ae.residual.extra_channels,
            "residual channels in mode R",
        ),
        spec(
            "lambda_dm",
            ae.lambda_dm,
            "weight of the residual moment penalty",
        ),
        spec(
            "decoder_channels",
            ae.decoder_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "decoder stage widths",
        ),
        spec("dit_dim", dit.dim, "transformer width"),
        spec("dit_layers", dit.layers, "transformer blocks"),
        spec("dit_heads", dit.heads, "query heads"),
        spec("dit_kv_heads", dit.kv_heads, "key/value heads"),
        spec("vocab", dit.vocab, "hashed text vocabulary size"),
        spec(
            "p_drop",
            LossConfig::default().p_drop,
            "caption dropout probability",
        ),
        spec("loss_norm", "squared", "squared or l2"),
        spec("clip", opts.clip, "global gradient-norm clip"),
        spec(
            "weight_decay",
            opts.weight_decay,
            "decoupled weight decay of diffusion stages",
        ),
        spec(
            "checkpoint_every",
            opts.checkpoint_every,
            "extra checkpoint interval in steps (0: stage ends only)",
        ),
        spec(
            "stop_after",
            0,
            "stop after this many steps in total, checkpointing first (0: run to the end)",
        ),
        spec("steps", sample.steps, "sampler steps"),
        spec("cfg", sample.cfg_scale, "guidance scale"),
        spec("count", 1, "images to sample"),
        spec(
            "prompt",
            "",
            "caption to sample; empty cycles through corpus captions or the null caption",
        ),
        spec("resolution", "48x48", "sampling resolution"),
        spec("max_text_len", 512, "caption token budget when sampling"),
        spec(
            "analysis_resolutions",
            "32x32,64x64",
            "resolutions compared by analyze",
        ),
        spec("analysis_images", 8, "corpus images used by analyze"),
    ];
    for s in default_ae_schedule().iter().chain(&default_dit_schedule()) {
        keys.extend(stage_keys(s));
    }
    keys
}

/// Resolved key/value pairs; starts from the defaults of [`registry`].
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: registry().into_iter().map(|k| (k.key, k.default)).collect(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::invalid("config", msg)
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(cfg_err(format!("unknown key {key:?}"))),
        }
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| cfg_err(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// All keys as `key = value` lines, sorted by key.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| cfg_err(format!("unknown key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| {
            cfg_err(format!(
                "{key} = {v:?} is not a valid {}",
                std::any::type_name::<T>()
            ))
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| cfg_err(format!("{key}: cannot parse {s:?}")))
            })
            .collect()
    }

    /// A path-valued key; empty means unset.
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let v = self.raw(key)?;
        Ok((!v.is_empty()).then(|| PathBuf::from(v)))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| cfg_err(format!("--{key} is required")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let shapes = self
            .list::<String>("shapes")?
            .iter()
            .map(|s| Shape::from_name(s).ok_or_else(|| cfg_err(format!("unknown shape {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let side = self.get("image_size")?;
        Ok(SyntheticSpec {
            n_images: self.get("n_images")?,
            width: side,
            height: side,
            shapes,
            colors: self.list("colors")?,
            sizes: self.list("sizes")?,
            backgrounds: self.list("backgrounds")?,
            seed: self.seed()?,
        })
    }

    pub fn ae_config(&self) -> Result<AeConfig> {
        let kind: FeaturizerKind = self.get::<String>("featurizer")?.parse()?;
        let mode: AeMode = self.get::<String>("ae_mode")?.parse()?;
        Ok(AeConfig {
            mode,
            featurizer: FeaturizerConfig {
                patch: self.get("patch")?,
                d_f: self.get("d_f")?,
                kind,
                ..Default::default()
            },
            residual: ResidualEncoderConfig {
                extra_channels: self.get("extra_channels")?,
                ..Default::default()
            },
            decoder_channels: self.list("decoder_channels")?,
            lambda_dm: self.get("lambda_dm")?,
        })
    }

    pub fn dit_config(&self) -> Result<DiTConfig> {
        let ae = self.ae_config()?;
        let cfg = DiTConfig {
            dim: self.get("dit_dim")?,
            layers: self.get("dit_layers")?,
            heads: self.get("dit_heads")?,
            kv_heads: self.get("dit_kv_heads")?,
            vocab: self.get("vocab")?,
            z_channels: ae.z_channels(),
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let norm = match self.raw("loss_norm")? {
            "squared" => LossNorm::Squared,
            "l2" => LossNorm::L2,
            other => {
                return Err(cfg_err(format!(
                    "loss_norm must be squared or l2, got {other:?}"
                )))
            }
        };
        let cfg = LossConfig {
            norm,
            p_drop: self.get("p_drop")?,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        let cfg = SampleConfig {
            steps: self.get("steps")?,
            cfg_scale: self.get("cfg")?,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            seed: self.seed()?,
            clip: self.get("clip")?,
            weight_decay: self.get("weight_decay")?,
            checkpoint_every: self.get("checkpoint_every")?,
            stop_after: Some(self.get::<usize>("stop_after")?).filter(|&n| n > 0),
            ..Default::default()
        })
    }

    fn stages(&self, defaults: Vec<StageConfig>) -> Result<Vec<StageConfig>> {
        defaults
            .into_iter()
            .map(|d| {
                let n = d.name.clone();
                let k = |field: &str| format!("{n}.{field}");
                let betas: Vec<f32> = self.list(&k("betas"))?;
                let &[b1, b2] = betas.as_slice() else {
                    return Err(cfg_err(format!("{} needs two values", k("betas"))));
                };
                let s = StageConfig {
                    anchor_resolution: self.get(&k("anchor"))?,
                    resolutions: parse_resolutions(self.raw(&k("resolutions"))?)?,
                    steps: self.get(&k("steps"))?,
                    batch: self.get(&k("batch"))?,
                    lr: self.get(&k("lr"))?,
                    betas: (b1, b2),
                    max_text_len: self.get(&k("max_text_len"))?,
                    dataset_id: self.get(&k("dataset"))?,
                    ..d
                };
                s.validate()?;
                Ok(s)
            })
            .collect()
    }

    pub fn ae_stages(&self) -> Result<Vec<StageConfig>> {
        self.stages(default_ae_schedule())
    }

    pub fn dit_stages(&self) -> Result<Vec<StageConfig>> {
        self.stages(default_dit_schedule())
    }
}
