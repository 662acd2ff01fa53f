//! Pretraining run settings: a JSON config file merged with flag overrides.
//! Flags win; unknown JSON keys are rejected; the fully resolved settings are
//! written next to the run outputs so every run records its provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use deskbert_core::encoder::EncoderConfig;
use deskbert_core::pretrain::{PhasePlan, PretrainConfig};
use deskbert_core::vocab::Casing;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Encoder shape, minus what the vocabulary file dictates (size, casing) and
/// what the curriculum dictates (max positions). Defaults are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub dropout: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 256,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSettings {
    pub phase1_max_len: usize,
    pub phase2_max_len: usize,
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
}

impl Default for PlanSettings {
    fn default() -> Self {
        let plan = PhasePlan::default();
        PlanSettings {
            phase1_max_len: plan.phase1_max_len,
            phase2_max_len: plan.phase2_max_len,
            plateau_window: plan.plateau_window,
            plateau_epsilon: plan.plateau_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub encoder: EncoderSettings,
    pub plan: PlanSettings,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub casing: Casing,
    pub checkpoint_every: u64,
    pub precision: Precision,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            encoder: EncoderSettings::default(),
            plan: PlanSettings::default(),
            total_steps: 1000,
            batch_size: 8,
            lr_max: 1e-3,
            warmup_fraction: 0.1,
            mask_rate: 0.15,
            seed: 0,
            casing: Casing::Uncased,
            checkpoint_every: 50,
            precision: Precision::F32,
        }
    }
}

/// Flag-level overrides; `Some` wins over the config file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct PretrainOverrides {
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_casing)]
    pub casing: Option<Casing>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

pub fn parse_casing(s: &str) -> Result<Casing, String> {
    match s {
        "cased" => Ok(Casing::Cased),
        "uncased" => Ok(Casing::Uncased),
        other => Err(format!("unknown casing {:?}; expected cased or uncased", other)),
    }
}

impl PretrainSettings {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading {}: {}", path.display(), e)))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {}: {}", path.display(), e)))
    }

    pub fn apply(&mut self, ov: &PretrainOverrides) {
        if let Some(v) = ov.total_steps {
            self.total_steps = v;
        }
        if let Some(v) = ov.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = ov.lr_max {
            self.lr_max = v;
        }
        if let Some(v) = ov.warmup_fraction {
            self.warmup_fraction = v;
        }
        if let Some(v) = ov.mask_rate {
            self.mask_rate = v;
        }
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.casing {
            self.casing = v;
        }
        if let Some(v) = ov.checkpoint_every {
            self.checkpoint_every = v;
        }
        if let Some(v) = ov.precision {
            self.precision = v;
        }
    }

    /// Concrete core configs for a given vocabulary size. The encoder starts
    /// at the phase-1 sequence length; the curriculum grows it later.
    pub fn to_core(&self, vocab_size: usize) -> (EncoderConfig, PretrainConfig) {
        let encoder = EncoderConfig {
            num_layers: self.encoder.num_layers,
            hidden_size: self.encoder.hidden_size,
            num_heads: self.encoder.num_heads,
            ff_size: self.encoder.ff_size,
            max_positions: self.plan.phase1_max_len,
            vocab_size,
            dropout: self.encoder.dropout,
            casing: self.casing,
        };
        let pretrain = PretrainConfig {
            plan: PhasePlan {
                phase1_max_len: self.plan.phase1_max_len,
                phase2_max_len: self.plan.phase2_max_len,
                plateau_window: self.plan.plateau_window,
                plateau_epsilon: self.plan.plateau_epsilon,
            },
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            warmup_fraction: self.warmup_fraction,
            mask_rate: self.mask_rate,
            seed: self.seed,
        };
        (encoder, pretrain)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.checkpoint_every == 0 {
            return Err(CliError::config("checkpoint_every must be positive"));
        }
        let (encoder, pretrain) = self.to_core(1);
        encoder.validate().map_err(|e| CliError::config(e.to_string()))?;
        pretrain.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }
}

/// Dotted key paths on which two resolved settings disagree.
pub fn settings_diff(a: &PretrainSettings, b: &PretrainSettings) -> Vec<String> {
    let va = serde_json::to_value(a).expect("settings serialize");
    let vb = serde_json::to_value(b).expect("settings serialize");
    let mut keys = Vec::new();
    diff_value("", &va, &vb, &mut keys);
    keys
}

fn diff_value(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            for (k, va) in ma {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{}.{}", prefix, k)
                };
                match mb.get(k) {
                    Some(vb) => diff_value(&path, va, vb, out),
                    None => out.push(path),
                }
            }
            for k in mb.keys() {
                if !ma.contains_key(k) {
                    out.push(if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{}.{}", prefix, k)
                    });
                }
            }
        }
        _ => {
            if a != b {
                out.push(prefix.to_string());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<PretrainSettings>(r#"{"totel_steps": 5}"#).unwrap_err();
        assert!(err.to_string().contains("totel_steps"));
    }

    #[test]
    fn flags_override_file_values() {
        let mut s = PretrainSettings {
            total_steps: 100,
            ..PretrainSettings::default()
        };
        let ov = PretrainOverrides {
            total_steps: Some(7),
            precision: Some(Precision::F64),
            ..PretrainOverrides::default()
        };
        s.apply(&ov);
        assert_eq!(s.total_steps, 7);
        assert_eq!(s.precision, Precision::F64);
        assert_eq!(s.batch_size, PretrainSettings::default().batch_size);
    }

    #[test]
    fn diff_lists_each_changed_key() {
        let a = PretrainSettings::default();
        let mut b = a.clone();
        b.seed = 9;
        b.encoder.hidden_size = 128;
        b.plan.phase2_max_len = 96;
        let mut keys = settings_diff(&a, &b);
        keys.sort();
        assert_eq!(keys, vec!["encoder.hidden_size", "plan.phase2_max_len", "seed"]);
        assert!(settings_diff(&a, &a).is_empty());
    }
}
