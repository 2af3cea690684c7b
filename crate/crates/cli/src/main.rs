//! Umbrella command-line interface: haze synthesis, weight precomputation,
//! training, evaluation, weight analysis, and the staged pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use clipce_core::config::RunConfig;
use clipce_core::data::DatasetManifest;
use clipce_core::embedding::provider_from_spec;
use clipce_core::haze::{BetaPolicy, DcpConfig, SynthesisConfig};
use clipce_core::raster::CropPolicy;

#[derive(Parser)]
#[command(
    name = "clipce",
    about = "Detection training with prompt-guided loss weights and physically-based haze synthesis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize hazy images from a manifest with depth maps.
    Hazegen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scattering coefficient policy: fixed:<k> or uniform:<lo>-<hi>.
        #[arg(long, default_value = "uniform:1-5")]
        beta: String,
        #[arg(long, default_value_t = 100.0)]
        clamp_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Treat depth maps as disparity (larger = nearer) and flip them.
        #[arg(long)]
        depth_invert: bool,
    },
    /// Precompute per-object loss weights into the cache file.
    Weights {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the reference detector with the configured loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint at IoU 0.5.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.35)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
    },
    /// Join the weight cache with training confidences into a CSV report.
    AnalyzeWeights {
        #[arg(long)]
        cache: PathBuf,
        /// Training log supplying per-object confidences.
        #[arg(long, conflicts_with = "ckpt")]
        log: Option<PathBuf>,
        /// Checkpoint (file or ckpt dir) to replay for confidences instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional provenance.jsonl for a transmission-based proxy.
        #[arg(long)]
        provenance: Option<PathBuf>,
    },
    /// Run the configured stages end to end, skipping up-to-date artifacts.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate the synthetic-shapes fixture dataset.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write synthetic depth maps for the haze pipeline.
        #[arg(long)]
        with_depth: bool,
    },
    /// Write an example run configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "runs/example")]
        out_dir: String,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Hazegen {
            manifest,
            out,
            beta,
            clamp_ratio,
            seed,
            depth_invert,
        } => {
            let dataset = DatasetManifest::load(&manifest)
                .with_context(|| format!("loading {}", manifest.display()))?;
            let cfg = SynthesisConfig {
                beta: BetaPolicy::parse(&beta)?,
                clamp_ratio,
                dcp: DcpConfig::default(),
                depth_invert,
            };
            let report = clipce_core::haze::synthesize_dataset(&dataset, &out, &cfg, seed)?;
            println!(
                "synthesized {} images into {} ({} skipped)",
                report.provenance.len(),
                out.display(),
                report.skipped.len()
            );
            for skip in &report.skipped {
                eprintln!("  skipped image {}: {}", skip.image_id, skip.reason);
            }
        }
        Command::Weights { config } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = load_manifest(&cfg)?;
            let provider = provider_from_spec(
                &cfg.embeddings.backend,
                cfg.embeddings.dim,
                cfg.prompts.clone(),
            )?;
            let report = clipce_core::weights::precompute_ame_weights(
                &manifest,
                provider.as_ref(),
                &cfg.prompts,
                &CropPolicy::default(),
            )?;
            let out = clipce_core::data::cache_dir(&cfg.out_dir()).join("weights.jsonl");
            report.cache.write_jsonl(&out)?;
            for err in &report.item_errors {
                eprintln!("  image {}: {}", err.image_id, err.message);
            }
            if let Some(reason) = report.aborted {
                bail!("aborted with partial cache at {}: {reason}", out.display());
            }
            println!(
                "wrote {} weight records to {}",
                report.cache.records.len(),
                out.display()
            );
        }
        Command::Train { config, seed } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = load_manifest(&cfg)?;
            let provider = provider_from_spec(
                &cfg.embeddings.backend,
                cfg.embeddings.dim,
                cfg.prompts.clone(),
            )?;
            let mut params = cfg.to_train_params()?;
            if let Some(seed) = seed {
                params.seed = seed;
            }
            let cache_path = clipce_core::data::cache_dir(&cfg.out_dir()).join("weights.jsonl");
            let cache = if cache_path.exists() {
                Some(clipce_core::weights::WeightCache::read_jsonl(&cache_path)?)
            } else {
                None
            };
            let out = clipce_core::trainer::train(
                &manifest,
                provider.as_ref(),
                cache.as_ref(),
                &params,
                &cfg.out_dir(),
            )?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            let last = out.log.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final branch {} cls {:.4} adapter {:.4}; log at {}",
                out.log.len(),
                last.branch,
                last.mean_cls_loss,
                last.mean_adapter_loss,
                out.log_path.display()
            );
        }
        Command::Eval {
            ckpt,
            manifest,
            out,
            score_threshold,
            nms_iou,
        } => {
            let dataset = DatasetManifest::load(&manifest)?;
            let detector = if ckpt.is_dir() {
                clipce_core::pipeline::latest_detector(&ckpt).or_else(|_| {
                    clipce_core::detector::TinyDetector::load(&ckpt.join("detector.json"))
                })?
            } else {
                clipce_core::detector::TinyDetector::load(&ckpt)?
            };
            let report =
                clipce_core::eval::evaluate(&detector, &dataset, score_threshold, nms_iou)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("map50 {:.4} -> {}", report.map50, out.display());
        }
        Command::AnalyzeWeights {
            cache,
            log,
            ckpt,
            manifest,
            out,
            provenance,
        } => {
            let dataset = DatasetManifest::load(&manifest)?;
            let cache = clipce_core::weights::WeightCache::read_jsonl(&cache)?;
            let prov = match provenance {
                Some(path) => Some(clipce_core::pipeline::read_provenance(&path)?),
                None => None,
            };
            let analysis = match (log, ckpt) {
                (Some(log), None) => {
                    let log = clipce_core::trainer::read_train_log(&log)?;
                    clipce_core::eval::weight_analysis(&dataset, &cache, &log, prov.as_deref())?
                }
                (None, Some(ckpt)) => {
                    let detector = if ckpt.is_dir() {
                        clipce_core::pipeline::latest_detector(&ckpt).or_else(|_| {
                            clipce_core::detector::TinyDetector::load(&ckpt.join("detector.json"))
                        })?
                    } else {
                        clipce_core::detector::TinyDetector::load(&ckpt)?
                    };
                    let records =
                        clipce_core::trainer::collect_object_records(&detector, &dataset)?;
                    clipce_core::eval::weight_analysis_from_records(
                        &dataset,
                        &cache,
                        &records,
                        prov.as_deref(),
                    )?
                }
                _ => bail!("provide exactly one of --log or --ckpt"),
            };
            clipce_core::eval::write_weight_csv(&analysis, &out)?;
            println!(
                "wrote {} rows to {} (skipped {}); spearman vs degradation: prompt-weight {:.4}, focal {:.4}",
                analysis.rows.len(),
                out.display(),
                analysis.skipped_rows,
                analysis.spearman_ame,
                analysis.spearman_focal
            );
        }
        Command::Pipeline { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = clipce_core::pipeline::run_pipeline(&cfg)?;
            for outcome in &report.outcomes {
                println!(
                    "[{}] {} {}",
                    if outcome.skipped { "skip" } else { " ran" },
                    outcome.stage,
                    outcome.artifact
                );
            }
        }
        Command::MakeFixture {
            out,
            images,
            seed,
            with_depth,
        } => {
            let manifest = clipce_core::shapes::generate_shapes_dataset(
                &clipce_core::shapes::ShapesConfig {
                    num_images: images,
                    seed,
                    with_depth,
                    ..clipce_core::shapes::ShapesConfig::default()
                },
                &out,
            )?;
            println!(
                "wrote {} images / {} objects under {}",
                manifest.entries.len(),
                manifest.total_annotations(),
                out.display()
            );
        }
        Command::InitConfig { out, out_dir } => {
            let cfg = RunConfig::example(&out_dir);
            std::fs::write(&out, serde_json::to_string_pretty(&cfg)?)?;
            println!("wrote example config to {}", out.display());
        }
    }
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    if let Some(path) = &cfg.dataset.manifest {
        return Ok(DatasetManifest::load(Path::new(path))?);
    }
    if let Some(coco) = &cfg.dataset.coco_annotations {
        let image_root = cfg
            .dataset
            .image_root
            .as_ref()
            .context("dataset.image_root required with coco_annotations")?;
        let report = clipce_core::data::ingest_coco(
            Path::new(coco),
            Path::new(image_root),
            cfg.dataset.depth_root.as_deref().map(Path::new),
        )?;
        if !report.missing_images.is_empty() {
            eprintln!("warning: {} images missing", report.missing_images.len());
        }
        return Ok(report.manifest);
    }
    bail!("config needs dataset.manifest or dataset.coco_annotations")
}
