//! Flat `key = value` run configuration. One pair per line, `#` starts a
//! comment, keys are namespaced (`model.width`, `compress.d2`, ...), parsing
//! is order-independent, and unknown keys are hard errors. Every key has a
//! documented default, so the empty file is a valid desk-scale run.

use std::collections::BTreeMap;

use clipmap_core::compress::CompressionSpec;
use clipmap_core::data::SyntheticSpec;
use clipmap_core::model::{EncoderConfig, InputSpec};
use clipmap_core::train::{StageConfig, StageKind};

use crate::{CliError, CliResult};

/// Fully-resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub model_width: usize,
    pub model_depth: usize,
    pub model_heads: usize,
    pub model_ffn_mult: usize,
    pub model_embed_dim: usize,
    pub model_vocab: usize,
    pub model_logit_scale: f64,
    pub compress: CompressionSpec,
    pub pretrain: StageConfig,
    pub map: StageConfig,
    pub retrain: StageConfig,
    /// Distillation weight λ for retraining; 1.0 = pure distillation.
    pub lambda: f64,
    /// Held-out pairs scored by `eval`.
    pub eval_pairs: usize,
    /// Master seed; model init, map init, batch order, and data splits all
    /// draw named substreams from it.
    pub seed: u64,
}

/// Every known key with its default, as `(key, default)` pairs. The parser
/// rejects anything not listed here.
pub const KEY_DEFAULTS: &[(&str, &str)] = &[
    ("data.attributes", "4"),
    ("data.values", "16"),
    ("data.grid", "4"),
    ("data.patch", "4"),
    ("data.channels", "1"),
    ("data.noise_std", "0.05"),
    ("data.seq_len", "16"),
    ("data.train_size", "2048"),
    ("data.val_size", "256"),
    ("model.width", "64"),
    ("model.depth", "8"),
    ("model.heads", "4"),
    ("model.ffn_mult", "4"),
    ("model.embed_dim", "32"),
    ("model.vocab", "96"),
    ("model.logit_scale", "50"),
    ("compress.d2", "32"),
    ("compress.l2", "4"),
    ("compress.off_diag_std", "0"),
    ("train.pretrain.steps", "2000"),
    ("train.pretrain.warmup", "200"),
    ("train.pretrain.lr", "0.001"),
    ("train.pretrain.weight_decay", "0.2"),
    ("train.pretrain.batch", "64"),
    ("train.pretrain.clip_norm", "5"),
    ("train.map.steps", "500"),
    ("train.map.warmup", "50"),
    ("train.map.lr", "0.001"),
    ("train.map.weight_decay", "0.2"),
    ("train.map.batch", "64"),
    ("train.map.clip_norm", "5"),
    ("train.retrain.steps", "2000"),
    ("train.retrain.warmup", "200"),
    ("train.retrain.lr", "0.0003"),
    ("train.retrain.weight_decay", "0.2"),
    ("train.retrain.batch", "64"),
    ("train.retrain.clip_norm", "5"),
    ("loss.lambda", "1.0"),
    ("eval.pairs", "256"),
    ("seed", "0"),
];

fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if out.insert(key.clone(), value).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(out)
}

struct Resolver {
    values: BTreeMap<String, String>,
}

impl Resolver {
    fn get(&mut self, key: &str) -> String {
        if let Some(v) = self.values.remove(key) {
            return v;
        }
        KEY_DEFAULTS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| d.to_string())
            .expect("every resolved key must be in KEY_DEFAULTS")
    }

    fn usize(&mut self, key: &str) -> CliResult<usize> {
        let v = self.get(key);
        v.parse().map_err(|_| CliError::Config(format!("key `{key}`: `{v}` is not an integer")))
    }

    fn u64(&mut self, key: &str) -> CliResult<u64> {
        let v = self.get(key);
        v.parse().map_err(|_| CliError::Config(format!("key `{key}`: `{v}` is not an integer")))
    }

    fn f64(&mut self, key: &str) -> CliResult<f64> {
        let v = self.get(key);
        v.parse().map_err(|_| CliError::Config(format!("key `{key}`: `{v}` is not a number")))
    }

    fn stage(&mut self, prefix: &str, stage: StageKind, seed: u64) -> CliResult<StageConfig> {
        Ok(StageConfig {
            stage,
            steps: self.usize(&format!("{prefix}.steps"))?,
            warmup: self.usize(&format!("{prefix}.warmup"))?,
            lr: self.f64(&format!("{prefix}.lr"))?,
            weight_decay: self.f64(&format!("{prefix}.weight_decay"))?,
            batch: self.usize(&format!("{prefix}.batch"))?,
            clip_norm: self.f64(&format!("{prefix}.clip_norm"))?,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            seed,
        })
    }
}

impl RunConfig {
    /// Parse config text; `seed_override` (the `--seed` flag) wins over the
    /// `seed` key if present.
    pub fn parse(text: &str, seed_override: Option<u64>) -> CliResult<Self> {
        let mut r = Resolver { values: parse_pairs(text)? };
        let seed = match seed_override {
            Some(s) => {
                r.get("seed"); // consume the key so it is not flagged unknown
                s
            }
            None => r.u64("seed")?,
        };
        let data = SyntheticSpec {
            n_attributes: r.usize("data.attributes")?,
            n_values: r.usize("data.values")?,
            grid: r.usize("data.grid")?,
            patch: r.usize("data.patch")?,
            channels: r.usize("data.channels")?,
            noise_std: r.f64("data.noise_std")?,
            seq_len: r.usize("data.seq_len")?,
            train_size: r.usize("data.train_size")?,
            val_size: r.usize("data.val_size")?,
            seed,
        };
        let cfg = RunConfig {
            model_width: r.usize("model.width")?,
            model_depth: r.usize("model.depth")?,
            model_heads: r.usize("model.heads")?,
            model_ffn_mult: r.usize("model.ffn_mult")?,
            model_embed_dim: r.usize("model.embed_dim")?,
            model_vocab: r.usize("model.vocab")?,
            model_logit_scale: r.f64("model.logit_scale")?,
            compress: CompressionSpec {
                width: r.usize("compress.d2")?,
                depth: r.usize("compress.l2")?,
                off_diag_std: r.f64("compress.off_diag_std")?,
            },
            pretrain: r.stage("train.pretrain", StageKind::Pretraining, seed)?,
            map: r.stage("train.map", StageKind::Mapping, seed)?,
            retrain: r.stage("train.retrain", StageKind::Retraining, seed)?,
            lambda: r.f64("loss.lambda")?,
            eval_pairs: r.usize("eval.pairs")?,
            seed,
            data,
        };
        if let Some(unknown) = r.values.keys().next() {
            return Err(CliError::Config(format!("unknown key `{unknown}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        if self.model_vocab < self.data.min_vocab() {
            return Err(CliError::Config(format!(
                "model.vocab {} below the {} tokens the data needs",
                self.model_vocab,
                self.data.min_vocab()
            )));
        }
        self.image_config()?.validate()?;
        self.text_config()?.validate()?;
        self.pretrain.validate()?;
        self.map.validate()?;
        self.retrain.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CliError::Config(format!(
                "loss.lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.eval_pairs == 0 || self.eval_pairs > self.data.val_size {
            return Err(CliError::Config(format!(
                "eval.pairs {} outside 1..={}",
                self.eval_pairs, self.data.val_size
            )));
        }
        Ok(())
    }

    pub fn image_config(&self) -> CliResult<EncoderConfig> {
        Ok(EncoderConfig {
            width: self.model_width,
            depth: self.model_depth,
            heads: self.model_heads,
            ffn_mult: self.model_ffn_mult,
            embed_dim: self.model_embed_dim,
            input: InputSpec::Image {
                grid: self.data.grid,
                patch: self.data.patch,
                channels: self.data.channels,
            },
        })
    }

    pub fn text_config(&self) -> CliResult<EncoderConfig> {
        Ok(EncoderConfig {
            width: self.model_width,
            depth: self.model_depth,
            heads: self.model_heads,
            ffn_mult: self.model_ffn_mult,
            embed_dim: self.model_embed_dim,
            input: InputSpec::Text { vocab: self.model_vocab, seq_len: self.data.seq_len },
        })
    }

    pub fn load(path: &std::path::Path, seed_override: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }
}
