//! Stage orchestration: synthesize -> weights -> train -> eval -> analyze.
//!
//! Each stage writes its artifact plus a stamp file recording {config hash,
//! seed, manifest hash, tool version, artifact hash}. A stage is skipped
//! when its stamp matches the current config and the artifact bytes still
//! hash to the stamped value; tampered artifacts re-execute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::DatasetManifest;
use crate::error::{CoreError, Result};
use crate::util;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub schema: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub manifest_hash: String,
    pub tool_version: String,
    pub artifact_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    pub artifact: String,
}

#[derive(Debug, Serialize)]
pub struct PipelineReport {
    pub outcomes: Vec<StageOutcome>,
}

fn file_hash(path: &Path) -> Result<u64> {
    Ok(util::fnv1a(&std::fs::read(path)?))
}

fn stamp_path(artifact: &Path) -> PathBuf {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".stamp.json");
    PathBuf::from(p)
}

fn write_stamp(
    artifact: &Path,
    stage: &str,
    config: &RunConfig,
    manifest_hash: u64,
) -> Result<()> {
    let stamp = StageStamp {
        schema: "stage-stamp/v1".into(),
        stage: stage.into(),
        config_hash: format!("{:016x}", config.content_hash()),
        seed: config.seed,
        manifest_hash: format!("{manifest_hash:016x}"),
        tool_version: TOOL_VERSION.into(),
        artifact_hash: format!("{:016x}", file_hash(artifact)?),
    };
    std::fs::write(stamp_path(artifact), serde_json::to_string_pretty(&stamp)?)?;
    Ok(())
}

fn stamp_is_current(
    artifact: &Path,
    stage: &str,
    config: &RunConfig,
    manifest_hash: u64,
) -> bool {
    let Ok(text) = std::fs::read_to_string(stamp_path(artifact)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<StageStamp>(&text) else {
        return false;
    };
    let Ok(current) = file_hash(artifact) else {
        return false;
    };
    stamp.stage == stage
        && stamp.config_hash == format!("{:016x}", config.content_hash())
        && stamp.seed == config.seed
        && stamp.manifest_hash == format!("{manifest_hash:016x}")
        && stamp.artifact_hash == format!("{current:016x}")
}

fn load_input_manifest(config: &RunConfig) -> Result<DatasetManifest> {
    if let Some(path) = &config.dataset.manifest {
        return DatasetManifest::load(Path::new(path));
    }
    if let Some(coco) = &config.dataset.coco_annotations {
        let image_root = config.dataset.image_root.as_ref().ok_or_else(|| {
            CoreError::Config("dataset.image_root required with coco_annotations".into())
        })?;
        let report = crate::data::ingest_coco(
            Path::new(coco),
            Path::new(image_root),
            config.dataset.depth_root.as_deref().map(Path::new),
        )?;
        return Ok(report.manifest);
    }
    Err(CoreError::Config(
        "config needs dataset.manifest or dataset.coco_annotations".into(),
    ))
}

/// Run the configured stages in order. A failing stage stops the pipeline,
/// leaving earlier artifacts in place.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineReport> {
    config.validate()?;
    let out_dir = config.out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let mut outcomes = Vec::new();

    let mut manifest = load_input_manifest(config)?;

    for stage in &config.stages {
        match stage.as_str() {
            "synthesize" => {
                let hazy_dir = out_dir.join("hazy");
                let artifact = hazy_dir.join("provenance.jsonl");
                let manifest_hash = manifest.content_hash();
                if stamp_is_current(&artifact, stage, config, manifest_hash) {
                    manifest = DatasetManifest::load(&hazy_dir.join("manifest.json"))?;
                    outcomes.push(StageOutcome {
                        stage: stage.clone(),
                        skipped: true,
                        artifact: artifact.display().to_string(),
                    });
                    continue;
                }
                let report = crate::haze::synthesize_dataset(
                    &manifest,
                    &hazy_dir,
                    &config.to_synthesis()?,
                    config.seed,
                )?;
                write_stamp(&artifact, stage, config, manifest_hash)?;
                manifest = DatasetManifest::load(&hazy_dir.join("manifest.json"))?;
                outcomes.push(StageOutcome {
                    stage: stage.clone(),
                    skipped: false,
                    artifact: format!(
                        "{} ({} images, {} skipped)",
                        artifact.display(),
                        report.provenance.len(),
                        report.skipped.len()
                    ),
                });
            }
            "weights" => {
                let artifact = crate::data::cache_dir(&out_dir).join("weights.jsonl");
                let manifest_hash = manifest.content_hash();
                if stamp_is_current(&artifact, stage, config, manifest_hash) {
                    outcomes.push(StageOutcome {
                        stage: stage.clone(),
                        skipped: true,
                        artifact: artifact.display().to_string(),
                    });
                    continue;
                }
                let provider = crate::embedding::provider_from_spec(
                    &config.embeddings.backend,
                    config.embeddings.dim,
                    config.prompts.clone(),
                )?;
                let report = crate::weights::precompute_ame_weights(
                    &manifest,
                    provider.as_ref(),
                    &config.prompts,
                    &crate::raster::CropPolicy::default(),
                )?;
                report.cache.write_jsonl(&artifact)?;
                if let Some(reason) = report.aborted {
                    return Err(CoreError::Provider(format!(
                        "weight precomputation aborted (partial cache written): {reason}"
                    )));
                }
                write_stamp(&artifact, stage, config, manifest_hash)?;
                outcomes.push(StageOutcome {
                    stage: stage.clone(),
                    skipped: false,
                    artifact: format!(
                        "{} ({} records, {} item errors)",
                        artifact.display(),
                        report.cache.records.len(),
                        report.item_errors.len()
                    ),
                });
            }
            "train" => {
                let artifact = out_dir.join("train_log.jsonl");
                let manifest_hash = manifest.content_hash();
                if stamp_is_current(&artifact, stage, config, manifest_hash) {
                    outcomes.push(StageOutcome {
                        stage: stage.clone(),
                        skipped: true,
                        artifact: artifact.display().to_string(),
                    });
                    continue;
                }
                let provider = crate::embedding::provider_from_spec(
                    &config.embeddings.backend,
                    config.embeddings.dim,
                    config.prompts.clone(),
                )?;
                let cache_path = crate::data::cache_dir(&out_dir).join("weights.jsonl");
                let cache = if cache_path.exists() {
                    Some(crate::weights::WeightCache::read_jsonl(&cache_path)?)
                } else {
                    None
                };
                crate::trainer::train(
                    &manifest,
                    provider.as_ref(),
                    cache.as_ref(),
                    &config.to_train_params()?,
                    &out_dir,
                )?;
                write_stamp(&artifact, stage, config, manifest_hash)?;
                outcomes.push(StageOutcome {
                    stage: stage.clone(),
                    skipped: false,
                    artifact: artifact.display().to_string(),
                });
            }
            "eval" => {
                let artifact = out_dir.join("report.json");
                let manifest_hash = manifest.content_hash();
                if stamp_is_current(&artifact, stage, config, manifest_hash) {
                    outcomes.push(StageOutcome {
                        stage: stage.clone(),
                        skipped: true,
                        artifact: artifact.display().to_string(),
                    });
                    continue;
                }
                let detector = latest_detector(&out_dir.join("ckpt"))?;
                let report = crate::eval::evaluate(
                    &detector,
                    &manifest,
                    config.detector.score_threshold,
                    config.detector.nms_iou,
                )?;
                std::fs::write(&artifact, serde_json::to_string_pretty(&report)?)?;
                write_stamp(&artifact, stage, config, manifest_hash)?;
                outcomes.push(StageOutcome {
                    stage: stage.clone(),
                    skipped: false,
                    artifact: format!("{} (map50 {:.4})", artifact.display(), report.map50),
                });
            }
            "analyze-weights" => {
                let artifact = out_dir.join("weights.csv");
                let manifest_hash = manifest.content_hash();
                if stamp_is_current(&artifact, stage, config, manifest_hash) {
                    outcomes.push(StageOutcome {
                        stage: stage.clone(),
                        skipped: true,
                        artifact: artifact.display().to_string(),
                    });
                    continue;
                }
                let cache = crate::weights::WeightCache::read_jsonl(
                    &crate::data::cache_dir(&out_dir).join("weights.jsonl"),
                )?;
                let log = crate::trainer::read_train_log(&out_dir.join("train_log.jsonl"))?;
                let provenance = read_provenance(&out_dir.join("hazy/provenance.jsonl")).ok();
                let analysis = crate::eval::weight_analysis(
                    &manifest,
                    &cache,
                    &log,
                    provenance.as_deref(),
                )?;
                crate::eval::write_weight_csv(&analysis, &artifact)?;
                write_stamp(&artifact, stage, config, manifest_hash)?;
                outcomes.push(StageOutcome {
                    stage: stage.clone(),
                    skipped: false,
                    artifact: format!(
                        "{} (spearman ame {:.3} vs focal {:.3})",
                        artifact.display(),
                        analysis.spearman_ame,
                        analysis.spearman_focal
                    ),
                });
            }
            other => {
                return Err(CoreError::Config(format!("unknown stage {other:?}")));
            }
        }
    }
    Ok(PipelineReport { outcomes })
}

/// Newest epoch checkpoint in a checkpoint directory.
pub fn latest_detector(ckpt_dir: &Path) -> Result<crate::detector::TinyDetector> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(ckpt_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(e) = name.strip_prefix("epoch_").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().map_or(true, |(b, _)| e > *b) {
                best = Some((e, entry.path()));
            }
        }
    }
    let (_, dir) = best.ok_or_else(|| {
        CoreError::State(format!("no epoch checkpoints under {}", ckpt_dir.display()))
    })?;
    crate::detector::TinyDetector::load(&dir.join("detector.json"))
}

pub fn read_provenance(path: &Path) -> Result<Vec<crate::haze::ProvenanceRecord>> {
    let mut out = Vec::new();
    for line in std::fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{generate_shapes_dataset, ShapesConfig};

    fn pipeline_config(dir: &Path, manifest_path: &Path) -> RunConfig {
        let mut cfg = RunConfig::example(dir.join("run").to_str().unwrap());
        cfg.dataset.manifest = Some(manifest_path.to_string_lossy().into_owned());
        cfg.embeddings.dim = 16;
        cfg.schedule = crate::config::ScheduleConfig {
            pretrain_epochs: 1,
            total_epochs: 2,
        };
        cfg.fame.hidden_dim = 16;
        cfg.stages = vec![
            "weights".into(),
            "train".into(),
            "eval".into(),
            "analyze-weights".into(),
        ];
        cfg
    }

    #[test]
    fn pipeline_runs_then_skips_then_reruns_on_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        generate_shapes_dataset(
            &ShapesConfig {
                num_images: 3,
                ..ShapesConfig::default()
            },
            &data_dir,
        )
        .unwrap();
        let cfg = pipeline_config(dir.path(), &data_dir.join("manifest.json"));

        let first = run_pipeline(&cfg).unwrap();
        assert!(first.outcomes.iter().all(|o| !o.skipped));

        let second = run_pipeline(&cfg).unwrap();
        assert!(second.outcomes.iter().all(|o| o.skipped), "{second:?}");

        // Tamper with the weight cache: that stage must re-execute.
        let cache_path = dir.path().join("run/cache/weights.jsonl");
        let mut text = std::fs::read_to_string(&cache_path).unwrap();
        text.push('\n');
        std::fs::write(&cache_path, text).unwrap();
        let third = run_pipeline(&cfg).unwrap();
        assert!(!third.outcomes[0].skipped);
    }

    #[test]
    fn weights_only_stage_list() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        generate_shapes_dataset(
            &ShapesConfig {
                num_images: 2,
                ..ShapesConfig::default()
            },
            &data_dir,
        )
        .unwrap();
        let mut cfg = pipeline_config(dir.path(), &data_dir.join("manifest.json"));
        cfg.stages = vec!["weights".into()];
        run_pipeline(&cfg).unwrap();
        assert!(dir.path().join("run/cache/weights.jsonl").exists());
        assert!(!dir.path().join("run/train_log.jsonl").exists());
    }

    #[test]
    fn pipeline_requires_a_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::example(dir.path().join("run").to_str().unwrap());
        assert!(run_pipeline(&cfg).is_err());
    }
}
