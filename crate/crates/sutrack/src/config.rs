//! Flat run configuration shared by the CLI commands.
//!
//! Every knob lives in one JSON object with full defaults, so a config file
//! only needs the fields it changes and `--set key=value` can override any
//! field from the command line (last occurrence wins).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::sampler::SampleMix;
use crate::embed::{EmbedMode, FusionMode, InitMode, Task, TokenTypeMode};
use crate::heads::PoolingMode;
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::tracker::TrackerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("cannot set `{key}` to `{value}`: {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("override `{arg}` is not of the form key=value")]
    BadOverride { arg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model shape.
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub template_res: usize,
    pub search_res: usize,
    pub task_head_hidden: usize,
    // Ablation axes.
    pub token_type_mode: TokenTypeMode,
    pub fusion_mode: FusionMode,
    pub embed_mode: EmbedMode,
    pub pooling_mode: PoolingMode,
    pub init_mode: InitMode,
    // Loss.
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    // Optimizer.
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    // Training.
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub max_frame_gap: usize,
    pub search_jitter: f64,
    /// Relative scale jitter on the training search-crop side. The tracker
    /// sizes its search window from its own last prediction, so training
    /// must cover a band of target scales, not just the ground-truth one.
    pub search_scale_jitter: f64,
    pub mix_rgb: f64,
    pub mix_rgbd: f64,
    pub mix_rgbt: f64,
    pub mix_rgbe: f64,
    pub mix_rgbl: f64,
    // Tracker.
    pub update_interval: usize,
    pub confidence_threshold: f64,
    pub template_factor: f64,
    pub search_factor: f64,
    pub window_weight: f64,
    // Synthetic data generation.
    pub gen_sequences: usize,
    pub gen_frames: usize,
    pub gen_frame_size: usize,
    pub gen_target_size: usize,
    pub gen_distractors: usize,
    pub gen_camouflage: bool,
    /// Restricts generation to one task; all five when absent.
    pub gen_task: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            patch_size: 16,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            template_res: 32,
            search_res: 64,
            task_head_hidden: 32,
            token_type_mode: TokenTypeMode::Soft,
            fusion_mode: FusionMode::Concat,
            embed_mode: EmbedMode::Unified,
            pooling_mode: PoolingMode::MeanPool,
            init_mode: InitMode::HalfCopy,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            lr_encoder: 3e-4,
            lr_other: 3e-3,
            weight_decay: 1e-4,
            steps: 2000,
            batch: 4,
            seed: 0,
            max_frame_gap: 30,
            search_jitter: 4.0,
            search_scale_jitter: 0.25,
            mix_rgb: 2.0,
            mix_rgbd: 1.0,
            mix_rgbt: 1.0,
            mix_rgbe: 1.0,
            mix_rgbl: 1.0,
            update_interval: 25,
            confidence_threshold: 0.7,
            template_factor: 2.0,
            search_factor: 4.0,
            window_weight: 1.0,
            gen_sequences: 200,
            gen_frames: 30,
            gen_frame_size: 64,
            gen_target_size: 12,
            gen_distractors: 2,
            gen_camouflage: false,
            gen_task: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies one `key=value` override. Values parse as JSON when they can
    /// (numbers, booleans, null) and as strings otherwise, so enum fields
    /// take their plain names: `--set fusion_mode=add`.
    pub fn apply_set(&mut self, arg: &str) -> Result<(), ConfigError> {
        let (key, value) = arg.split_once('=').ok_or_else(|| ConfigError::BadOverride {
            arg: arg.to_string(),
        })?;
        let mut tree = match serde_json::to_value(&*self)? {
            serde_json::Value::Object(map) => map,
            _ => unreachable!("config serializes to an object"),
        };
        if !tree.contains_key(key) {
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
            });
        }
        let parsed = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        tree.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(tree)).map_err(|e| {
            ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                message: e.to_string(),
            }
        })?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.patch_size,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            template_res: self.template_res,
            search_res: self.search_res,
            token_type: self.token_type_mode,
            fusion: self.fusion_mode,
            embed: self.embed_mode,
            pooling: self.pooling_mode,
            init: self.init_mode,
            task_head_hidden: self.task_head_hidden,
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            template_factor: self.template_factor,
            search_factor: self.search_factor,
            template_res: self.template_res,
            search_res: self.search_res,
            update_interval: self.update_interval,
            confidence_threshold: self.confidence_threshold,
            window_weight: self.window_weight,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_giou: self.lambda_giou,
            lambda_l1: self.lambda_l1,
            focal_alpha: self.focal_alpha,
            focal_beta: self.focal_beta,
        }
    }

    pub fn optim_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr_encoder: self.lr_encoder,
            lr_other: self.lr_other,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn sample_mix(&self) -> SampleMix {
        let mut weights = [0.0; Task::ALL.len()];
        weights[Task::Rgb.index()] = self.mix_rgb;
        weights[Task::Rgbd.index()] = self.mix_rgbd;
        weights[Task::Rgbt.index()] = self.mix_rgbt;
        weights[Task::Rgbe.index()] = self.mix_rgbe;
        weights[Task::Rgbl.index()] = self.mix_rgbl;
        SampleMix { weights }
    }

    pub fn gen_tasks(&self) -> Result<Vec<Task>, ConfigError> {
        match &self.gen_task {
            None => Ok(Task::ALL.to_vec()),
            Some(name) => Task::from_name(name).map(|t| vec![t]).ok_or_else(|| {
                ConfigError::BadValue {
                    key: "gen_task".to_string(),
                    value: name.clone(),
                    message: "not a task name".to_string(),
                }
            }),
        }
    }
}
