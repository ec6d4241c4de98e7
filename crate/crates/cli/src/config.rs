//! `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

use tcrf_core::encoder::EncoderConfig;
use tcrf_core::model::ModelShape;
use tcrf_core::par::Parallelism;
use tcrf_core::trainer::TrainConfig;

use crate::Usage;

pub const OUTPUT_ROOT_ENV: &str = "TCRF_OUTPUT_ROOT";

/// Every recognised key with its default, in echo order. An empty default
/// means "unset".
const KEYS: &[(&str, &str)] = &[
    ("train", ""),
    ("dev", ""),
    ("test", ""),
    ("emissions", ""),
    ("dev_emissions", ""),
    ("test_emissions", ""),
    ("checkpoint", ""),
    ("output_dir", "runs/default"),
    ("model_shape", "transformer_crf"),
    ("d_model", "512"),
    ("heads", "8"),
    ("layers", "6"),
    ("d_ff", "2048"),
    ("max_sequence", "128"),
    ("token_embedding_dim", "600"),
    ("min_frequency", "1"),
    ("batch_size", "4"),
    ("learning_rate", "0.005"),
    ("max_epochs", "100"),
    ("patience", "20"),
    ("dropout", "0.1"),
    ("adam_beta1", "0.9"),
    ("adam_beta2", "0.999"),
    ("adam_epsilon", "1e-8"),
    ("grad_clip_norm", ""),
    ("seed", "0"),
    ("constrain_bioes", "true"),
    ("report_epoch", ""),
    ("report_label", "best"),
    ("wall_time", "false"),
    ("parallel", "true"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(_, v)| v.to_string()).collect(),
        }
    }
}

fn slot(key: &str) -> Option<usize> {
    KEYS.iter().position(|(k, _)| *k == key)
}

impl RunConfig {
    /// Parses config text. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Usage(format!("{origin}:{}: expected `key = value`", i + 1)).into());
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let i = slot(key).ok_or_else(|| format!("unknown key `{key}`"))?;
        self.values[i] = value.to_string();
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Usage(format!("--set expects key=value, got `{p}`")))?;
            self.set(k.trim(), v.trim()).map_err(Usage)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[slot(key).expect("known key")]
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e| Usage(format!("`{key} = {v}`: {e}")).into())
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.typed(key).map(Some)
        }
    }

    pub fn shape(&self) -> Result<ModelShape> {
        self.typed("model_shape")
    }

    pub fn min_frequency(&self) -> Result<usize> {
        self.typed("min_frequency")
    }

    pub fn report_label(&self) -> &str {
        self.get("report_label")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.typed("batch_size")?,
            learning_rate: self.typed("learning_rate")?,
            max_epochs: self.typed("max_epochs")?,
            patience: self.typed("patience")?,
            dropout: self.typed("dropout")?,
            adam_beta1: self.typed("adam_beta1")?,
            adam_beta2: self.typed("adam_beta2")?,
            adam_epsilon: self.typed("adam_epsilon")?,
            grad_clip_norm: self.optional("grad_clip_norm")?,
            seed: self.typed("seed")?,
            model_shape: self.shape()?,
            constrain_bioes: self.typed("constrain_bioes")?,
            report_epoch: self.optional("report_epoch")?,
            record_wall_time: self.typed("wall_time")?,
            parallelism: if self.typed("parallel")? {
                Parallelism::Rayon
            } else {
                Parallelism::Sequential
            },
        };
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn encoder_config(&self, vocabulary_size: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            d_model: self.typed("d_model")?,
            heads: self.typed("heads")?,
            layers: self.typed("layers")?,
            d_ff: self.typed("d_ff")?,
            max_sequence: self.typed("max_sequence")?,
            dropout: self.typed("dropout")?,
            token_embedding_dim: self.typed("token_embedding_dim")?,
            vocabulary_size,
            seed: self.typed("seed")?,
        };
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// `output_dir`, placed under the output-root override when one is set
    /// and the configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(Path::new(self.get("output_dir")))
    }

    /// Every key in a fixed order; feeding this back reproduces the run.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for ((k, _), v) in KEYS.iter().zip(&self.values) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

pub fn resolve_output(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
