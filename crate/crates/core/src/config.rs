//! Run configuration: one strict JSON document.
//!
//! Unknown keys are rejected so typos cannot silently change a run. Every
//! artifact a run produces is stamped with this config's hash plus the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::TinyDetectorConfig;
use crate::embedding::PromptTemplates;
use crate::error::{CoreError, Result};
use crate::loss::ClipCeSchedule;
use crate::trainer::{LossKind, TrainParams};
use crate::util;

pub const RUN_CONFIG_SCHEMA: &str = "runconfig/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    /// Path to a manifest JSON; mutually exclusive with `coco_annotations`.
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub coco_annotations: Option<String>,
    #[serde(default)]
    pub image_root: Option<String>,
    #[serde(default)]
    pub depth_root: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsConfig {
    pub backend: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    64
}

impl Default for EmbeddingsConfig {
    fn default() -> Self {
        Self {
            backend: "stub:42".into(),
            dim: default_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: String,
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: "clipce".into(),
            alpha1: 0.5,
            alpha2: 1.0,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub pretrain_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 15,
            total_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FameConfig {
    pub hidden_dim: usize,
    pub lr: f64,
    pub theta: f64,
}

impl Default for FameConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            lr: 0.01,
            theta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorRunConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    #[serde(default)]
    pub tiny: TinyDetectorConfig,
}

impl Default for DetectorRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 0.01,
            score_threshold: 0.35,
            nms_iou: 0.5,
            tiny: TinyDetectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeRunConfig {
    pub beta: String,
    pub clamp_ratio: f64,
    pub dcp_patch: usize,
    pub dcp_bright_fraction: f64,
}

impl Default for HazeRunConfig {
    fn default() -> Self {
        Self {
            beta: "uniform:1-5".into(),
            clamp_ratio: 100.0,
            dcp_patch: 15,
            dcp_bright_fraction: 0.001,
        }
    }
}

/// Depth ingestion options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DepthConfig {
    /// Treat maps as disparity (larger = nearer) and flip before clamping.
    pub invert: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub out_dir: String,
    #[serde(default)]
    pub dataset: DatasetPaths,
    #[serde(default)]
    pub embeddings: EmbeddingsConfig,
    #[serde(default)]
    pub prompts: PromptTemplates,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub fame: FameConfig,
    #[serde(default)]
    pub detector: DetectorRunConfig,
    #[serde(default)]
    pub haze: HazeRunConfig,
    #[serde(default)]
    pub depth: DepthConfig,
    /// Pipeline stages to run, in order. Valid: synthesize, weights, train,
    /// eval, analyze-weights.
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
}

fn default_stages() -> Vec<String> {
    vec!["weights".into(), "train".into(), "eval".into(), "analyze-weights".into()]
}

impl Default for DatasetPaths {
    fn default() -> Self {
        Self {
            manifest: None,
            coco_annotations: None,
            image_root: None,
            depth_root: None,
        }
    }
}

impl RunConfig {
    pub fn example(out_dir: &str) -> Self {
        Self {
            schema: RUN_CONFIG_SCHEMA.into(),
            seed: 42,
            out_dir: out_dir.into(),
            dataset: DatasetPaths::default(),
            embeddings: EmbeddingsConfig::default(),
            prompts: PromptTemplates::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            fame: FameConfig::default(),
            detector: DetectorRunConfig::default(),
            haze: HazeRunConfig::default(),
            depth: DepthConfig::default(),
            stages: default_stages(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CoreError::Config(format!("{}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != RUN_CONFIG_SCHEMA {
            return Err(CoreError::Config(format!(
                "unsupported config schema {:?} (expected {RUN_CONFIG_SCHEMA:?})",
                self.schema
            )));
        }
        self.loss.kind.parse::<LossKind>()?;
        self.to_schedule()?.validate()?;
        crate::adapter::SoftLabelParams::new(self.fame.theta)?;
        crate::haze::BetaPolicy::parse(&self.haze.beta)?;
        if self.haze.dcp_patch == 0 || self.haze.dcp_patch % 2 == 0 {
            return Err(CoreError::Config("haze.dcp_patch must be odd".into()));
        }
        if self.detector.batch_size == 0 {
            return Err(CoreError::Config("detector.batch_size must be positive".into()));
        }
        for stage in &self.stages {
            if !matches!(
                stage.as_str(),
                "synthesize" | "weights" | "train" | "eval" | "analyze-weights"
            ) {
                return Err(CoreError::Config(format!("unknown stage {stage:?}")));
            }
        }
        Ok(())
    }

    pub fn to_schedule(&self) -> Result<ClipCeSchedule> {
        ClipCeSchedule::new(
            self.loss.alpha1,
            self.loss.alpha2,
            self.schedule.pretrain_epochs,
            self.schedule.total_epochs,
        )
    }

    pub fn to_train_params(&self) -> Result<TrainParams> {
        Ok(TrainParams {
            schedule: self.to_schedule()?,
            loss_kind: self.loss.kind.parse()?,
            gamma: self.loss.gamma,
            theta: self.fame.theta,
            batch_size: self.detector.batch_size,
            detector_lr: self.detector.lr,
            adapter_lr: self.fame.lr,
            adapter_hidden: self.fame.hidden_dim,
            detector: self.detector.tiny.clone(),
            crop_policy: crate::raster::CropPolicy::default(),
            templates: self.prompts.clone(),
            seed: self.seed,
        })
    }

    pub fn to_synthesis(&self) -> Result<crate::haze::SynthesisConfig> {
        Ok(crate::haze::SynthesisConfig {
            beta: crate::haze::BetaPolicy::parse(&self.haze.beta)?,
            clamp_ratio: self.haze.clamp_ratio,
            dcp: crate::haze::DcpConfig {
                patch_size: self.haze.dcp_patch,
                bright_fraction: self.haze.dcp_bright_fraction,
            },
            depth_invert: self.depth.invert,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// Stable hash of the canonical JSON serialization.
    pub fn content_hash(&self) -> u64 {
        util::fnv1a(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}
