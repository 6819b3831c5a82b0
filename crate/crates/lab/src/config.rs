//! JSON run configuration. Every field is optional and overlays the
//! built-in defaults (which follow the toolkit's standard settings:
//! routing threshold 0.2, balance coefficient 1e-2, z coefficient 1e-3,
//! capacity factors 1.25 train / 2.0 eval). Unknown keys are rejected
//! by name; `schema_version` is required.

use crate::optim::TrainableSubset;
use crate::trainer::{NoiseConfig, TrainConfig};
use moelab_core::losses::LossConfig;
use moelab_core::model::ModelConfig;
use moelab_core::ops::{BiasMode, FfnKind};
use moelab_core::routing::{DropPolicy, RouterPrecision, Top1Gate};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0}, this build reads version 1")]
    Schema(u32),
}

macro_rules! overlay {
    ($target:expr, $section:expr, { $($field:ident),* $(,)? }) => {
        $(if let Some(v) = $section.$field.clone() {
            $target.$field = v;
        })*
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_kv: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enc_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dec_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_layer_freq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparse_dense: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn: Option<FfnKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms_scale: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_mode: Option<BiasMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RouterSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_capacity_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_capacity_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_policy: Option<DropPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub router_precision: Option<RouterPrecision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_gate: Option<Top1Gate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    /// Explicit null disables clipping, same as omitting the field.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_update_rms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_jitter: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remove_geglu: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remove_rms_scale: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainable_subset: Option<TrainableSubset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reset_optimizer_state: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_span: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_batches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance_coeff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_coeff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_n_list: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_list: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub small_train_examples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub large_train_examples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_examples: Option<usize>,
}

/// Resolved study settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyParams {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub top_n_list: Vec<usize>,
    pub cf_list: Vec<f64>,
    pub batch_list: Vec<usize>,
    pub lr_list: Vec<f64>,
    pub num_classes: usize,
    pub small_train_examples: usize,
    pub large_train_examples: usize,
    pub heldout_examples: usize,
}

impl Default for StudyParams {
    fn default() -> Self {
        Self {
            seeds: (0..8).collect(),
            steps: 60,
            peak_lr: 0.3,
            warmup_steps: 6,
            top_n_list: vec![1, 2, 3],
            cf_list: vec![0.75, 1.0, 1.25, 2.0],
            batch_list: vec![192, 384, 768],
            lr_list: vec![1e-3, 3e-3, 1e-2],
            num_classes: 8,
            small_train_examples: 256,
            large_train_examples: 16384,
            heldout_examples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub router: RouterSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub study: StudySection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            model: ModelSection::default(),
            router: RouterSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            study: StudySection::default(),
        }
    }
}

impl CliConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: CliConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.schema_version != 1 {
            return Err(ConfigError::Schema(cfg.schema_version));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        overlay!(cfg, self.model, {
            num_layers, d_model, d_ff, d_kv, num_heads, vocab_size, enc_len,
            dec_len, expert_layer_freq, sparse_dense, ffn, rms_scale,
            bias_mode, dropout, expert_dropout, seed,
        });
        overlay!(cfg.router, self.router, {
            num_experts, top_n, train_capacity_factor, eval_capacity_factor,
            threshold, group_size, jitter_eps, drop_policy, router_precision,
            top1_gate,
        });
        cfg
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut loss = LossConfig::default();
        overlay!(loss, self.loss, { balance_coeff, z_coeff });
        loss
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig { loss: self.loss_config(), ..TrainConfig::default() };
        overlay!(tc, self.train, {
            steps, batch_tokens, peak_lr, warmup_steps, seeds, remove_geglu,
            remove_rms_scale, trainable_subset, reset_optimizer_state,
            divergence_factor, mean_span, corrupt_fraction, heldout_batches,
            eval_every,
        });
        if let Some(clip) = self.train.clip_update_rms {
            tc.clip_update_rms = Some(clip);
        }
        let mut noise = NoiseConfig::default();
        if let Some(j) = self.train.input_jitter {
            noise.input_jitter = j;
        }
        if let Some(d) = self.train.dropout {
            noise.dropout = d;
        }
        if let Some(d) = self.train.expert_dropout {
            noise.expert_dropout = d;
        }
        tc.noise = noise;
        tc
    }

    pub fn study_params(&self) -> StudyParams {
        let mut p = StudyParams::default();
        overlay!(p, self.study, {
            seeds, steps, peak_lr, warmup_steps, top_n_list, cf_list,
            batch_list, lr_list, num_classes, small_train_examples,
            large_train_examples, heldout_examples,
        });
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_to_documented_defaults() {
        let cfg = CliConfig::from_str(r#"{"schema_version": 1}"#).unwrap();
        let model = cfg.model_config();
        assert_eq!(model, ModelConfig::default());
        assert_eq!(model.router.threshold, 0.2);
        assert_eq!(model.router.train_capacity_factor, 1.25);
        assert_eq!(model.router.eval_capacity_factor, 2.0);
        let loss = cfg.loss_config();
        assert_eq!(loss.balance_coeff, 1e-2);
        assert_eq!(loss.z_coeff, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = CliConfig::from_str(r#"{"schema_version":1,"model":{"d_modle":32}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("d_modle"), "{err}");
        let err = CliConfig::from_str(r#"{"schema_version":1,"turbo":true}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("turbo"), "{err}");
    }

    #[test]
    fn schema_version_is_required_and_checked() {
        let err = CliConfig::from_str(r#"{}"#).unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
        assert!(matches!(
            CliConfig::from_str(r#"{"schema_version": 7}"#),
            Err(ConfigError::Schema(7))
        ));
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let text = r#"{
            "schema_version": 1,
            "model": {"d_model": 48, "ffn": "relu", "bias_mode": "multiplicative"},
            "router": {"num_experts": 8, "top_n": 1, "top1_gate": "unit"},
            "train": {"steps": 50, "trainable_subset": "non_moe", "clip_update_rms": 0.5},
            "loss": {"z_coeff": 0.0},
            "study": {"seeds": [3, 4], "cf_list": [1.0, 2.0]}
        }"#;
        let parsed = CliConfig::from_str(text).unwrap();
        let serialized = serde_json::to_string_pretty(&parsed).unwrap();
        let reparsed = CliConfig::from_str(&serialized).unwrap();
        assert_eq!(parsed, reparsed);
    }

    #[test]
    fn overlays_land_on_the_right_fields() {
        let cfg = CliConfig::from_str(
            r#"{
                "schema_version": 1,
                "model": {"d_model": 48, "num_layers": 3},
                "router": {"num_experts": 8},
                "train": {"peak_lr": 0.5, "input_jitter": true, "steps": 77},
                "study": {"num_classes": 4}
            }"#,
        )
        .unwrap();
        let model = cfg.model_config();
        assert_eq!(model.d_model, 48);
        assert_eq!(model.num_layers, 3);
        assert_eq!(model.router.num_experts, 8);
        assert_eq!(model.d_ff, ModelConfig::default().d_ff);
        let tc = cfg.train_config();
        assert_eq!(tc.peak_lr, 0.5);
        assert_eq!(tc.steps, 77);
        assert!(tc.noise.input_jitter);
        assert_eq!(cfg.study_params().num_classes, 4);
        assert_eq!(cfg.study_params().steps, StudyParams::default().steps);
    }
}
