//! Two-objective training loop: detection losses update the detector heads,
//! the supervision loss updates the adapter, and nothing else moves. The
//! per-object loss weights enter the detection objective as constants.
//!
//! Determinism contract: given (dataset, seed, config) the run is bitwise
//! reproducible. Every random draw comes from a stream keyed on (seed,
//! epoch, purpose), so subsystems cannot perturb each other.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_step, Adapter, AdapterConfig, AdapterExample, RoiFeature, SoftLabelParams};
use crate::boxes::{iou, match_positive_proposals, BoxPx};
use crate::data::DatasetManifest;
use crate::detector::{
    bce_with_logit, rpn_labels, sample_indices, smooth_l1, TinyDetector, TinyDetectorConfig,
};
use crate::embedding::{Embedding, EmbeddingProvider, PromptTemplates};
use crate::error::{CoreError, Result};
use crate::loss::{ClipCeSchedule, ScheduleBranch, PROB_EPS};
use crate::raster::{CropPolicy, Raster};
use crate::util;
use crate::weights::WeightCache;

pub const TRAIN_LOG_SCHEMA: &str = "train-log/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Focal,
    ClipCe,
}

impl std::str::FromStr for LossKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "focal" => Ok(LossKind::Focal),
            "clipce" => Ok(LossKind::ClipCe),
            other => Err(CoreError::Config(format!(
                "unknown loss.kind {other:?} (expected ce|focal|clipce)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainParams {
    pub schedule: ClipCeSchedule,
    pub loss_kind: LossKind,
    pub gamma: f64,
    pub theta: f64,
    pub batch_size: usize,
    pub detector_lr: f64,
    pub adapter_lr: f64,
    pub adapter_hidden: usize,
    pub detector: TinyDetectorConfig,
    pub crop_policy: CropPolicy,
    pub templates: PromptTemplates,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            schedule: ClipCeSchedule {
                alpha1: 0.5,
                alpha2: 1.0,
                pretrain_epochs: 15,
                total_epochs: 20,
            },
            loss_kind: LossKind::ClipCe,
            gamma: 2.0,
            theta: 0.5,
            batch_size: 4,
            detector_lr: 0.01,
            adapter_lr: 0.01,
            adapter_hidden: 512,
            detector: TinyDetectorConfig::default(),
            crop_policy: CropPolicy::default(),
            templates: PromptTemplates::default(),
            seed: 42,
        }
    }
}

/// One JSON line per epoch in `train_log.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema: String,
    pub epoch: usize,
    pub branch: ScheduleBranch,
    pub mean_cls_loss: f64,
    pub mean_rpn_loss: f64,
    pub mean_bbox_loss: f64,
    pub mean_adapter_loss: f64,
    pub mean_active_weight: f64,
    pub matched_objects: usize,
    /// Last-seen detector confidence per annotation id.
    pub object_pt: BTreeMap<String, f64>,
    /// Last-seen loss weight per annotation id (prompt or fused, by branch).
    pub object_weight: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub log: Vec<EpochRecord>,
    pub ckpt_dir: PathBuf,
    pub log_path: PathBuf,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    schema: String,
    seed: u64,
    epoch: usize,
}

/// Precomputed per-object and per-class embeddings; the encoders are frozen
/// so this is computed once per run.
struct EmbeddingTable {
    visual: BTreeMap<(u64, u64), Embedding>,
    texts: Vec<(Embedding, Embedding)>,
    w_ame: BTreeMap<(u64, u64), f64>,
}

fn build_embedding_table(
    manifest: &DatasetManifest,
    images: &BTreeMap<u64, Raster>,
    provider: &dyn EmbeddingProvider,
    params: &TrainParams,
    cache: Option<&WeightCache>,
    warnings: &mut Vec<String>,
) -> Result<EmbeddingTable> {
    let mut texts = Vec::new();
    for class_name in &manifest.class_names {
        let pair = params.templates.pair_for(class_name)?;
        texts.push((
            provider.encode_text(&pair.positive_text)?,
            provider.encode_text(&pair.negative_text)?,
        ));
    }
    let mut visual = BTreeMap::new();
    let mut w_ame = BTreeMap::new();
    let cached = match cache {
        Some(c) if c.is_compatible(provider, &params.templates) => Some(c.lookup()),
        Some(_) => {
            warnings.push(
                "weight cache incompatible with provider/templates; recomputing on the fly".into(),
            );
            None
        }
        None => {
            warnings.push("no weight cache supplied; computing AME weights on the fly".into());
            None
        }
    };
    for entry in &manifest.entries {
        let image = images
            .get(&entry.image_id)
            .ok_or_else(|| CoreError::State(format!("image {} not loaded", entry.image_id)))?;
        for ann in &entry.annotations {
            let class_name = &manifest.class_names[ann.class_index];
            let hint = ann.degradation.map(|g| crate::embedding::StubHint {
                class_name: class_name.clone(),
                degradation: g,
            });
            let v = crate::embedding::encode_image_crop(
                provider,
                image,
                &ann.bbox,
                &params.crop_policy,
                hint.as_ref(),
            )?;
            let key = (entry.image_id, ann.annotation_id);
            let w = match cached.as_ref().and_then(|m| m.get(&key)) {
                Some(rec) => rec.w_ame,
                None => {
                    let (t_pos, t_neg) = &texts[ann.class_index];
                    crate::weights::ame_weight(&crate::weights::SimilarityPair::new(
                        v.dot(t_pos)?,
                        v.dot(t_neg)?,
                    )?)?
                }
            };
            visual.insert(key, v);
            w_ame.insert(key, w);
        }
    }
    Ok(EmbeddingTable {
        visual,
        texts,
        w_ame,
    })
}

struct Accumulator {
    cls_loss: f64,
    cls_count: usize,
    rpn_loss: f64,
    rpn_count: usize,
    bbox_loss: f64,
    bbox_count: usize,
    adapter_loss: f64,
    adapter_count: usize,
    weight_sum: f64,
    weight_count: usize,
    matched: usize,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            cls_loss: 0.0,
            cls_count: 0,
            rpn_loss: 0.0,
            rpn_count: 0,
            bbox_loss: 0.0,
            bbox_count: 0,
            adapter_loss: 0.0,
            adapter_count: 0,
            weight_sum: 0.0,
            weight_count: 0,
            matched: 0,
        }
    }

    fn mean(total: f64, count: usize) -> f64 {
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Focal-loss gradient w.r.t. logits (full derivative, not a detached
/// multiplier): `dL/dz_k = dL/dp_t * p_t (delta_k - p_k)`.
fn focal_dlogits(probs: &[f64], gt: usize, gamma: f64) -> Vec<f64> {
    let p = probs[gt].clamp(PROB_EPS, 1.0 - PROB_EPS);
    let dl_dp = gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p;
    probs
        .iter()
        .enumerate()
        .map(|(k, &pk)| dl_dp * p * (if k == gt { 1.0 } else { 0.0 } - pk))
        .collect()
}

/// Run the full training loop; writes per-epoch checkpoints and the metrics
/// log under `out_dir` and returns the parsed log.
pub fn train(
    manifest: &DatasetManifest,
    provider: &dyn EmbeddingProvider,
    cache: Option<&WeightCache>,
    params: &TrainParams,
    out_dir: &Path,
) -> Result<TrainOutput> {
    manifest.validate()?;
    params.schedule.validate()?;
    let labels = SoftLabelParams::new(params.theta)?;
    if params.batch_size == 0 {
        return Err(CoreError::Config("batch_size must be positive".into()));
    }
    let mut warnings = Vec::new();

    let mut images: BTreeMap<u64, Raster> = BTreeMap::new();
    for entry in &manifest.entries {
        images.insert(entry.image_id, crate::data::load_entry_image(entry)?);
    }

    let table = build_embedding_table(manifest, &images, provider, params, cache, &mut warnings)?;

    let mut det_cfg = params.detector.clone();
    det_cfg.num_classes = manifest.class_names.len();
    let mut detector = TinyDetector::new(det_cfg, params.seed)?;
    let background = detector.background_index();

    let adapter_cfg = AdapterConfig {
        input_dim: provider.descriptor().embedding_dim + detector.config.roi_feature_dim(),
        hidden_dim: params.adapter_hidden,
        output_dim: provider.descriptor().embedding_dim,
        learning_rate: params.adapter_lr,
    };
    let mut adapter_rng = util::seeded_rng(params.seed, "adapter-init");
    let mut adapter = Adapter::seeded(adapter_cfg, &mut adapter_rng)?;

    let ckpt_dir = out_dir.join("ckpt");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut log: Vec<EpochRecord> = Vec::new();

    for epoch in 1..=params.schedule.total_epochs {
        let branch = params.schedule.branch(epoch)?;
        let mut acc = Accumulator::new();
        let mut object_pt: BTreeMap<String, f64> = BTreeMap::new();
        let mut object_weight: BTreeMap<String, f64> = BTreeMap::new();

        let epoch_seed = util::fnv1a_parts(&[&params.seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]);
        let mut shuffle_rng = util::seeded_rng(epoch_seed, "epoch-shuffle");
        let mut sample_rng = util::seeded_rng(epoch_seed, "epoch-sample");

        let mut order: Vec<usize> = (0..manifest.entries.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for batch_indices in order.chunks(params.batch_size) {
            let mut grads = detector.zero_grads();
            // (roi, dlogits, item loss)
            let mut cls_items: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
            // (anchor cell features, anchor size index, dlogit, item loss)
            let mut rpn_items: Vec<(Vec<f64>, usize, f64, f64)> = Vec::new();
            let mut reg_items: Vec<(Vec<f64>, [f64; 4], f64)> = Vec::new();
            let mut adapter_batch: Vec<AdapterExample> = Vec::new();

            for &entry_idx in batch_indices {
                let entry = &manifest.entries[entry_idx];
                let image = &images[&entry.image_id];
                let feat = detector.features(image);
                let anchors = detector.anchors(image.width(), image.height());
                let logits = detector.objectness_logits(&feat, &anchors);
                let gt_boxes: Vec<BoxPx> = entry.annotations.iter().map(|a| a.bbox).collect();

                // Proposal-network supervision.
                let labels_rpn = rpn_labels(&anchors, &gt_boxes);
                let pos_pool: Vec<usize> = labels_rpn
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| **l == Some(true))
                    .map(|(i, _)| i)
                    .collect();
                let neg_pool: Vec<usize> = labels_rpn
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| **l == Some(false))
                    .map(|(i, _)| i)
                    .collect();
                for &i in sample_indices(&pos_pool, 16, &mut sample_rng).iter() {
                    let (loss, dlogit) = bce_with_logit(logits[i], 1.0);
                    let cell = detector.anchor_cell_features(&feat, &anchors[i]);
                    rpn_items.push((cell, i % detector.config.anchor_sizes.len(), dlogit, loss));
                }
                for &i in sample_indices(&neg_pool, 16, &mut sample_rng).iter() {
                    let (loss, dlogit) = bce_with_logit(logits[i], 0.0);
                    let cell = detector.anchor_cell_features(&feat, &anchors[i]);
                    rpn_items.push((cell, i % detector.config.anchor_sizes.len(), dlogit, loss));
                }

                // Proposals for the second stage; ground-truth boxes join the
                // pool during training so positives exist from epoch one.
                let mut proposals = detector.propose(&feat, image.width(), image.height());
                let n_model = proposals.len();
                proposals.extend_from_slice(&gt_boxes);
                let matches = match_positive_proposals(&proposals, &gt_boxes, 0.5);
                // Regression trains on genuine model proposals: targets for an
                // injected ground-truth box are identically zero.
                let reg_matches = match_positive_proposals(&proposals[..n_model], &gt_boxes, 0.5);

                let mut n_pos = 0usize;
                for (ann, matched) in entry.annotations.iter().zip(&matches) {
                    let Some((prop_idx, prop_iou)) = matched else {
                        continue;
                    };
                    n_pos += 1;
                    acc.matched += 1;
                    let proposal = proposals[*prop_idx];
                    let roi = detector.roi_feature(&feat, &proposal);
                    let probs = detector.class_probs(&roi);
                    let p_t = probs[ann.class_index];
                    object_pt.insert(ann.annotation_id.to_string(), p_t);
                    let key = (entry.image_id, ann.annotation_id);
                    let w_ame = table.w_ame[&key];

                    // Per-branch multiplier and the weight we log.
                    let (multiplier, active_weight, dlogits) = match params.loss_kind {
                        LossKind::ClipCe => {
                            let (m, w) = match branch {
                                ScheduleBranch::Ame => {
                                    ((params.schedule.alpha1 * w_ame).exp(), w_ame)
                                }
                                ScheduleBranch::Fame => {
                                    let roi_feature = RoiFeature::new(
                                        roi.clone(),
                                        proposal,
                                        *prop_iou,
                                    )?;
                                    let adapted =
                                        adapter.adapt(&table.visual[&key], &roi_feature)?;
                                    let (t_pos, t_neg) = &table.texts[ann.class_index];
                                    let w_offset =
                                        crate::adapter::offset_weight(&adapted, t_pos, t_neg)?;
                                    let w_fame = crate::adapter::fame_weight(w_ame, w_offset)?;
                                    ((params.schedule.alpha2 * w_fame).exp(), w_fame)
                                }
                            };
                            let d: Vec<f64> = probs
                                .iter()
                                .enumerate()
                                .map(|(k, &pk)| {
                                    m * (pk - if k == ann.class_index { 1.0 } else { 0.0 })
                                })
                                .collect();
                            (m, Some(w), d)
                        }
                        LossKind::Ce => {
                            let d: Vec<f64> = probs
                                .iter()
                                .enumerate()
                                .map(|(k, &pk)| pk - if k == ann.class_index { 1.0 } else { 0.0 })
                                .collect();
                            (1.0, None, d)
                        }
                        LossKind::Focal => {
                            let w = (1.0 - p_t).powf(params.gamma);
                            (
                                w,
                                Some(w),
                                focal_dlogits(&probs, ann.class_index, params.gamma),
                            )
                        }
                    };
                    let item_loss = match params.loss_kind {
                        LossKind::Focal => {
                            (1.0 - p_t).powf(params.gamma) * -p_t.clamp(PROB_EPS, 1.0).ln()
                        }
                        _ => multiplier * -p_t.clamp(PROB_EPS, 1.0).ln(),
                    };
                    if let Some(w) = active_weight {
                        object_weight.insert(ann.annotation_id.to_string(), w);
                        acc.weight_sum += w;
                        acc.weight_count += 1;
                    }
                    cls_items.push((roi.clone(), dlogits, item_loss));

                    // Adapter supervision (independent objective). Confidence
                    // is detached: only its value crosses over.
                    adapter_batch.push(AdapterExample {
                        visual: table.visual[&key].clone(),
                        roi: RoiFeature::new(roi, proposal, *prop_iou)?,
                        p_t,
                        t_pos: table.texts[ann.class_index].0.clone(),
                        t_neg: table.texts[ann.class_index].1.clone(),
                    });
                }

                // Model-proposal positives: each reuses its matched object's
                // weight in the classification loss and supervises the box
                // regressor (targets for an injected ground-truth box are
                // identically zero, so those stay out of regression).
                let mut extra_pos: Vec<(usize, usize)> = Vec::new();
                for (ann_idx, matched) in reg_matches.iter().enumerate() {
                    if let Some((prop_idx, _)) = matched {
                        extra_pos.push((*prop_idx, ann_idx));
                    }
                }
                for (prop_idx, prop) in proposals[..n_model].iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for (ann_idx, ann) in entry.annotations.iter().enumerate() {
                        let ov = iou(prop, &ann.bbox);
                        if ov > 0.5 && best.map_or(true, |(_, b)| ov > b) {
                            best = Some((ann_idx, ov));
                        }
                    }
                    if let Some((ann_idx, _)) = best {
                        if !extra_pos.contains(&(prop_idx, ann_idx)) {
                            extra_pos.push((prop_idx, ann_idx));
                        }
                    }
                }
                extra_pos.sort();
                extra_pos.dedup();
                // Keep the per-image positive count bounded as the proposal
                // network sharpens.
                let cap = (2 * entry.annotations.len()).max(4);
                let pool: Vec<usize> = (0..extra_pos.len()).collect();
                let mut keep = sample_indices(&pool, cap, &mut sample_rng);
                keep.sort();
                for &k in &keep {
                    let (prop_idx, ann_idx) = extra_pos[k];
                    let ann = &entry.annotations[ann_idx];
                    let proposal = proposals[prop_idx];
                    let roi = detector.roi_feature(&feat, &proposal);
                    let probs = detector.class_probs(&roi);
                    let p_t = probs[ann.class_index];
                    let key = (entry.image_id, ann.annotation_id);
                    let w_ame = table.w_ame[&key];
                    let multiplier = match params.loss_kind {
                        LossKind::ClipCe => match branch {
                            ScheduleBranch::Ame => (params.schedule.alpha1 * w_ame).exp(),
                            ScheduleBranch::Fame => {
                                // Reuse the fused weight logged for this object
                                // this epoch; it was computed from its best
                                // proposal just above.
                                let w = object_weight
                                    .get(&ann.annotation_id.to_string())
                                    .copied()
                                    .unwrap_or(w_ame);
                                (params.schedule.alpha2 * w).exp()
                            }
                        },
                        LossKind::Ce => 1.0,
                        LossKind::Focal => (1.0 - p_t).powf(params.gamma),
                    };
                    let dlogits: Vec<f64> = match params.loss_kind {
                        LossKind::Focal => focal_dlogits(&probs, ann.class_index, params.gamma),
                        _ => probs
                            .iter()
                            .enumerate()
                            .map(|(k, &pk)| {
                                multiplier * (pk - if k == ann.class_index { 1.0 } else { 0.0 })
                            })
                            .collect(),
                    };
                    let item_loss = multiplier * -p_t.clamp(PROB_EPS, 1.0).ln();
                    cls_items.push((roi.clone(), dlogits, item_loss));

                    let targets = TinyDetector::regression_targets(&proposal, &ann.bbox);
                    let deltas = detector.bbox_deltas(&roi);
                    let mut ddeltas = [0.0; 4];
                    let mut reg_loss = 0.0;
                    for k in 0..4 {
                        let (l, d) = smooth_l1(deltas[k] - targets[k]);
                        reg_loss += l;
                        ddeltas[k] = d;
                    }
                    reg_items.push((roi, ddeltas, reg_loss));
                }

                // Background proposals: plain cross-entropy against the
                // background class; per-object weights do not apply.
                let bg_pool: Vec<usize> = proposals
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| {
                        gt_boxes.iter().map(|g| iou(p, g)).fold(0.0f64, f64::max) < 0.3
                    })
                    .map(|(i, _)| i)
                    .collect();
                let bg_take = n_pos.max(2);
                for &i in sample_indices(&bg_pool, bg_take, &mut sample_rng).iter() {
                    let roi = detector.roi_feature(&feat, &proposals[i]);
                    let probs = detector.class_probs(&roi);
                    let d: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &pk)| pk - if k == background { 1.0 } else { 0.0 })
                        .collect();
                    let loss = -probs[background].clamp(PROB_EPS, 1.0).ln();
                    cls_items.push((roi, d, loss));
                }
            }

            // Mean-reduce each component over its batch items and backprop.
            if !cls_items.is_empty() {
                let scale = 1.0 / cls_items.len() as f64;
                for (roi, dlogits, loss) in &cls_items {
                    let scaled: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
                    detector.head_backward(roi, &scaled, &mut grads);
                    acc.cls_loss += loss;
                }
                acc.cls_count += cls_items.len();
            }
            if !rpn_items.is_empty() {
                let scale = 1.0 / rpn_items.len() as f64;
                for (cell, size_idx, dlogit, loss) in &rpn_items {
                    detector.rpn_backward(cell, *size_idx, dlogit * scale, &mut grads);
                    acc.rpn_loss += loss;
                }
                acc.rpn_count += rpn_items.len();
            }
            if !reg_items.is_empty() {
                let scale = 1.0 / reg_items.len() as f64;
                for (roi, ddeltas, loss) in &reg_items {
                    let scaled = [
                        ddeltas[0] * scale,
                        ddeltas[1] * scale,
                        ddeltas[2] * scale,
                        ddeltas[3] * scale,
                    ];
                    detector.reg_backward(roi, &scaled, &mut grads);
                    acc.bbox_loss += loss;
                }
                acc.bbox_count += reg_items.len();
            }
            detector.apply_grads(&grads, params.detector_lr);

            if !adapter_batch.is_empty() {
                let loss = adapter_step(&mut adapter, &adapter_batch, &labels)?;
                acc.adapter_loss += loss * adapter_batch.len() as f64;
                acc.adapter_count += adapter_batch.len();
            }
        }

        let record = EpochRecord {
            schema: TRAIN_LOG_SCHEMA.into(),
            epoch,
            branch,
            mean_cls_loss: Accumulator::mean(acc.cls_loss, acc.cls_count),
            mean_rpn_loss: Accumulator::mean(acc.rpn_loss, acc.rpn_count),
            mean_bbox_loss: Accumulator::mean(acc.bbox_loss, acc.bbox_count),
            mean_adapter_loss: Accumulator::mean(acc.adapter_loss, acc.adapter_count),
            mean_active_weight: Accumulator::mean(acc.weight_sum, acc.weight_count),
            matched_objects: acc.matched,
            object_pt,
            object_weight,
        };
        let finite = record.mean_cls_loss.is_finite()
            && record.mean_rpn_loss.is_finite()
            && record.mean_bbox_loss.is_finite()
            && record.mean_adapter_loss.is_finite();
        let epoch_dir = if finite {
            ckpt_dir.join(format!("epoch_{epoch}"))
        } else {
            ckpt_dir.join(format!("abort_epoch_{epoch}"))
        };
        detector.save(&epoch_dir.join("detector.json"))?;
        adapter.save(&epoch_dir.join("adapter.json"))?;
        std::fs::write(
            epoch_dir.join("rngstate.json"),
            serde_json::to_string(&RngState {
                schema: "rngstate/v1".into(),
                seed: params.seed,
                epoch,
            })?,
        )?;
        if !finite {
            return Err(CoreError::Numeric(format!(
                "non-finite loss at epoch {epoch}: cls {} rpn {} bbox {} adapter {}; state saved to {}",
                record.mean_cls_loss,
                record.mean_rpn_loss,
                record.mean_bbox_loss,
                record.mean_adapter_loss,
                epoch_dir.display()
            )));
        }
        log.push(record);
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut f = std::fs::File::create(&log_path)?;
    for record in &log {
        writeln!(f, "{}", serde_json::to_string(record)?)?;
    }
    Ok(TrainOutput {
        log,
        ckpt_dir,
        log_path,
        warnings,
    })
}

/// Parse a `train_log.jsonl` file back into records.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for line in std::fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Per-object state reconstructed from a checkpoint: the ROI feature and
/// confidence at each ground-truth box, mirroring the training-time view
/// where the object's own box always joins the proposal pool.
pub fn collect_object_records(
    detector: &TinyDetector,
    manifest: &DatasetManifest,
) -> Result<Vec<crate::detector::ObjectRecord>> {
    let mut out = Vec::new();
    for entry in &manifest.entries {
        let image = crate::data::load_entry_image(entry)?;
        let feat = detector.features(&image);
        for ann in &entry.annotations {
            let roi = detector.roi_feature(&feat, &ann.bbox);
            let probs = detector.class_probs(&roi);
            let p_t = probs[ann.class_index];
            out.push(crate::detector::ObjectRecord {
                image_id: entry.image_id,
                annotation_id: ann.annotation_id,
                class_index: ann.class_index,
                gt_box: ann.bbox,
                matched_roi: Some(RoiFeature::new(roi, ann.bbox, 1.0)?),
                p_t: Some(p_t),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubProvider;
    use crate::shapes::{generate_shapes_dataset, ShapesConfig};

    fn small_fixture(dir: &Path, n: usize) -> DatasetManifest {
        generate_shapes_dataset(
            &ShapesConfig {
                num_images: n,
                ..ShapesConfig::default()
            },
            dir,
        )
        .unwrap()
    }

    fn quick_params(epochs: usize, pretrain: usize, kind: LossKind) -> TrainParams {
        TrainParams {
            schedule: ClipCeSchedule::new(0.5, 1.0, pretrain, epochs).unwrap(),
            loss_kind: kind,
            adapter_hidden: 16,
            ..TrainParams::default()
        }
    }

    #[test]
    fn schedule_branches_logged() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_fixture(&dir.path().join("data"), 2);
        let provider = StubProvider::new(1, 16, PromptTemplates::default()).unwrap();
        let out = train(
            &manifest,
            &provider,
            None,
            &quick_params(2, 1, LossKind::ClipCe),
            &dir.path().join("run"),
        )
        .unwrap();
        assert_eq!(out.log[0].branch, ScheduleBranch::Ame);
        assert_eq!(out.log[1].branch, ScheduleBranch::Fame);
        assert!(dir.path().join("run/ckpt/epoch_2/detector.json").exists());
        assert!(dir.path().join("run/ckpt/epoch_2/adapter.json").exists());
        assert!(dir.path().join("run/ckpt/epoch_2/rngstate.json").exists());
    }

    #[test]
    fn deterministic_given_seed() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_fixture(&dir.path().join("data"), 3);
        let provider = StubProvider::new(1, 16, PromptTemplates::default()).unwrap();
        let params = quick_params(2, 1, LossKind::ClipCe);
        let a = train(&manifest, &provider, None, &params, &dir.path().join("a")).unwrap();
        let b = train(&manifest, &provider, None, &params, &dir.path().join("b")).unwrap();
        let la = std::fs::read_to_string(a.log_path).unwrap();
        let lb = std::fs::read_to_string(b.log_path).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn alpha_zero_matches_plain_ce_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_fixture(&dir.path().join("data"), 2);
        let provider = StubProvider::new(1, 16, PromptTemplates::default()).unwrap();
        let mut clipce0 = quick_params(2, 1, LossKind::ClipCe);
        clipce0.schedule = ClipCeSchedule::new(0.0, 0.0, 1, 2).unwrap();
        let ce = quick_params(2, 1, LossKind::Ce);
        let a = train(&manifest, &provider, None, &clipce0, &dir.path().join("a")).unwrap();
        let b = train(&manifest, &provider, None, &ce, &dir.path().join("b")).unwrap();
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.mean_cls_loss.to_bits(), rb.mean_cls_loss.to_bits());
            assert_eq!(ra.object_pt, rb.object_pt);
        }
    }

    #[test]
    fn missing_cache_warns_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_fixture(&dir.path().join("data"), 2);
        let provider = StubProvider::new(1, 16, PromptTemplates::default()).unwrap();
        let out = train(
            &manifest,
            &provider,
            None,
            &quick_params(1, 1, LossKind::ClipCe),
            &dir.path().join("run"),
        )
        .unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("on the fly")));
    }

    #[test]
    fn adapter_isolated_from_detector_in_phase_one() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_fixture(&dir.path().join("data"), 2);
        let provider = StubProvider::new(1, 16, PromptTemplates::default()).unwrap();
        // Phase one only (pretrain == total): adapter lr must not matter.
        let mut p1 = quick_params(2, 2, LossKind::ClipCe);
        p1.adapter_lr = 0.01;
        let mut p2 = quick_params(2, 2, LossKind::ClipCe);
        p2.adapter_lr = 0.0;
        let a = train(&manifest, &provider, None, &p1, &dir.path().join("a")).unwrap();
        let b = train(&manifest, &provider, None, &p2, &dir.path().join("b")).unwrap();
        let da = TinyDetector::load(&a.ckpt_dir.join("epoch_2/detector.json")).unwrap();
        let db = TinyDetector::load(&b.ckpt_dir.join("epoch_2/detector.json")).unwrap();
        assert_eq!(da.trainable_params(), db.trainable_params());
        // And the adapters must differ (nonzero lr actually trained).
        let aa = Adapter::load(&a.ckpt_dir.join("epoch_2/adapter.json")).unwrap();
        let ab = Adapter::load(&b.ckpt_dir.join("epoch_2/adapter.json")).unwrap();
        assert_ne!(aa.params_flat(), ab.params_flat());
    }
}
