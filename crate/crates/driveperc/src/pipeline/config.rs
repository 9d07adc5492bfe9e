//! TOML configuration with a strict schema: unknown keys are rejected.
//! Three presets: `published` (full-scale reference settings), `toy`
//! (desk-scale synthetic training), and `micro` (fast CI-scale runs).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::det_decoder::DetConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input image size (height, width); both divisible by 32.
    pub input_size: [usize; 2],
    pub channel_width: usize,
    pub backbone_depths: [usize; 4],
    pub backbone_widths: [usize; 4],
    pub attention_heads: usize,
    pub attention_layers: usize,
    /// Object queries (N).
    pub num_queries: usize,
    /// Detection decoder layers (L).
    pub det_layers: usize,
    pub det_points: usize,
    /// Denoising groups (G).
    pub dn_groups: usize,
    /// Segmentation decoder projection width (divisible by 4).
    pub seg_proj_width: usize,
    /// Insert the gated fusion modules between the shared encoder and each
    /// task branch. Off = the vanilla multi-task baseline.
    pub gca: bool,
    pub task_detection: bool,
    pub task_drivable: bool,
    pub task_lane: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    /// Only "cosine" is supported.
    pub schedule: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub da_threshold: f64,
    pub ll_threshold: f64,
    /// Global gradient-norm ceiling (0 disables clipping).
    #[serde(default = "default_clip_grad_norm")]
    pub clip_grad_norm: f64,
}

fn default_clip_grad_norm() -> f64 {
    10.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// "synthetic" or "bdd".
    pub dataset: String,
    /// Synthetic sample count.
    pub samples: usize,
    /// Synthetic generator seed (independent of the training seed).
    pub seed: u64,
    pub image_dir: Option<String>,
    pub annotations: Option<String>,
    pub da_mask_dir: Option<String>,
    pub ll_mask_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    /// Full-scale settings as published: 640x640 input, 256-channel
    /// pyramid, 300 queries, 6 decoder layers, 100 denoising groups.
    pub fn published() -> Self {
        Config {
            model: ModelConfig {
                input_size: [640, 640],
                channel_width: 256,
                backbone_depths: [1, 2, 2, 1],
                backbone_widths: [32, 64, 128, 256],
                attention_heads: 8,
                attention_layers: 1,
                num_queries: 300,
                det_layers: 6,
                det_points: 4,
                dn_groups: 100,
                seg_proj_width: 64,
                gca: true,
                task_detection: true,
                task_drivable: true,
                task_lane: true,
            },
            train: TrainConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 0.0005,
                warmup_epochs: 3,
                warmup_momentum: 0.8,
                warmup_bias_lr: 0.1,
                schedule: "cosine".to_string(),
                epochs: 300,
                batch_size: 16,
                seed: 0,
                loss: LossWeights::default(),
                da_threshold: 0.45,
                ll_threshold: 0.9,
                clip_grad_norm: default_clip_grad_norm(),
            },
            data: DataConfig {
                dataset: "bdd".to_string(),
                samples: 0,
                seed: 0,
                image_dir: None,
                annotations: None,
                da_mask_dir: None,
                ll_mask_dir: None,
            },
        }
    }

    /// Desk-scale synthetic-data settings: 320x320 input, 128 channels,
    /// 60 queries, 3 layers, 10 denoising groups.
    pub fn toy() -> Self {
        let mut c = Config::published();
        c.model.input_size = [320, 320];
        c.model.channel_width = 128;
        c.model.backbone_widths = [16, 32, 64, 128];
        c.model.num_queries = 60;
        c.model.det_layers = 3;
        c.model.dn_groups = 10;
        c.model.seg_proj_width = 32;
        c.train.epochs = 50;
        c.train.batch_size = 4;
        c.data.dataset = "synthetic".to_string();
        c.data.samples = 64;
        c
    }

    /// Minimal settings for fast single-core runs and tests.
    pub fn micro() -> Self {
        let mut c = Config::toy();
        c.model.input_size = [64, 64];
        c.model.channel_width = 16;
        c.model.backbone_widths = [8, 16, 16, 16];
        c.model.backbone_depths = [1, 1, 1, 1];
        c.model.attention_heads = 4;
        c.model.num_queries = 12;
        c.model.det_layers = 2;
        c.model.det_points = 2;
        c.model.dn_groups = 4;
        c.model.seg_proj_width = 16;
        c.train.warmup_epochs = 1;
        c.train.epochs = 4;
        c.train.batch_size = 2;
        c.data.samples = 8;
        c
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: (self.model.input_size[0], self.model.input_size[1]),
            channel_width: self.model.channel_width,
            backbone_depths: self.model.backbone_depths,
            backbone_widths: self.model.backbone_widths,
            attention_heads: self.model.attention_heads,
            attention_layers: self.model.attention_layers,
        }
    }

    pub fn det_config(&self) -> DetConfig {
        DetConfig {
            num_queries: self.model.num_queries,
            layers: self.model.det_layers,
            heads: self.model.attention_heads,
            points: self.model.det_points,
            dn_groups: self.model.dn_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.model.task_detection {
            self.det_config().validate(self.model.channel_width)?;
        }
        if self.model.seg_proj_width == 0 || self.model.seg_proj_width % 4 != 0 {
            return Err(Error::config("seg_proj_width must be a positive multiple of 4"));
        }
        if !(self.model.task_detection || self.model.task_drivable || self.model.task_lane) {
            return Err(Error::config("at least one task must be enabled"));
        }
        let t = &self.train;
        for (name, v) in [
            ("lr", t.lr),
            ("momentum", t.momentum),
            ("weight_decay", t.weight_decay),
            ("warmup_momentum", t.warmup_momentum),
            ("warmup_bias_lr", t.warmup_bias_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if t.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if t.schedule != "cosine" {
            return Err(Error::config(format!(
                "unsupported schedule `{}`; only `cosine` is implemented",
                t.schedule
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        t.loss.validate()?;
        crate::seg_decoder::validate_threshold(t.da_threshold)?;
        crate::seg_decoder::validate_threshold(t.ll_threshold)?;
        match self.data.dataset.as_str() {
            "synthetic" => {
                if self.data.samples == 0 {
                    return Err(Error::config("synthetic dataset needs samples >= 1"));
                }
            }
            "bdd" => {}
            other => {
                return Err(Error::config(format!(
                    "unknown dataset `{other}` (expected `synthetic` or `bdd`)"
                )))
            }
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config encode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::published().validate().unwrap();
        Config::toy().validate().unwrap();
        Config::micro().validate().unwrap();
    }

    #[test]
    fn published_preset_matches_reference_settings() {
        let c = Config::published();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0005);
        assert_eq!(c.train.warmup_epochs, 3);
        assert_eq!(c.train.warmup_momentum, 0.8);
        assert_eq!(c.train.warmup_bias_lr, 0.1);
        assert_eq!(c.train.schedule, "cosine");
        assert_eq!((c.train.da_threshold, c.train.ll_threshold), (0.45, 0.9));
        assert_eq!(c.model.input_size, [640, 640]);
        assert_eq!(c.model.num_queries, 300);
        assert_eq!(c.model.det_layers, 6);
        assert_eq!(c.model.dn_groups, 100);
        let w = c.train.loss;
        assert_eq!(
            (w.alpha, w.beta, w.gamma, w.lambda_fl, w.lambda_bce, w.lambda_tv),
            (1.0, 5.0, 2.0, 24.0, 8.0, 8.0)
        );
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::toy();
        let text = c.to_toml().unwrap();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(back.model.input_size, c.model.input_size);
        assert_eq!(back.train.seed, c.train.seed);
        assert_eq!(back.data.dataset, c.data.dataset);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = Config::micro().to_toml().unwrap();
        text.push_str("\n[model2]\nfoo = 1\n");
        assert!(Config::from_toml(&text).is_err());
        let bad = Config::micro()
            .to_toml()
            .unwrap()
            .replace("lr = 0.01", "lr = 0.01\nlearning_rate_extra = 3.0");
        assert!(Config::from_toml(&bad).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = Config::micro();
        c.train.da_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = Config::micro();
        c.train.schedule = "step".into();
        assert!(c.validate().is_err());
        let mut c = Config::micro();
        c.model.input_size = [63, 64];
        assert!(c.validate().is_err());
        let mut c = Config::micro();
        c.model.task_detection = false;
        c.model.task_drivable = false;
        c.model.task_lane = false;
        assert!(c.validate().is_err());
    }
}
