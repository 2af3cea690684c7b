//! Detection evaluation (mAP at IoU 0.5, all-point interpolation) and the
//! weight-analysis report comparing prompt weights against focal weights.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxPx};
use crate::data::DatasetManifest;
use crate::detector::{Detection, TinyDetector};
use crate::error::{CoreError, Result};
use crate::haze::ProvenanceRecord;
use crate::trainer::EpochRecord;
use crate::weights::WeightCache;

/// A detection attributed to an image, for dataset-level AP.
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub image_id: u64,
    pub score: f64,
    pub bbox: BoxPx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gt: usize,
    pub detections: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub per_class_ap: BTreeMap<String, f64>,
    pub map50: f64,
    pub counts: EvalCounts,
    /// Classes with zero ground truth, excluded from the mean.
    pub skipped_classes: Vec<String>,
}

pub const EVAL_REPORT_SCHEMA: &str = "eval-report/v1";

#[derive(Debug, Clone, Copy)]
pub struct ApResult {
    pub ap: f64,
    pub matched: usize,
}

/// Average precision for one class over a dataset.
///
/// Detections are sorted by descending score (ties keep input order) and
/// matched greedily one-to-one against unmatched ground truth of the same
/// image at `iou_thresh`. The returned AP is the area under the all-point
/// interpolated precision-recall curve.
pub fn average_precision(detections: &[ScoredBox], gts: &[(u64, BoxPx)], iou_thresh: f64) -> ApResult {
    if gts.is_empty() {
        return ApResult { ap: 0.0, matched: 0 };
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (image_id, gt_box)) in gts.iter().enumerate() {
            if *image_id != det.image_id || gt_used[gi] {
                continue;
            }
            let ov = iou(&det.bbox, gt_box);
            if ov >= iou_thresh && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    let matched = tp_flags.iter().filter(|&&t| t).count();

    // Precision-recall points, then the interpolated envelope from the right.
    let n_gt = gts.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < points.len() {
        let recall = points[i].0;
        let envelope = points[i..]
            .iter()
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
        i += 1;
    }
    ApResult { ap, matched }
}

/// Evaluate pre-computed detections against a manifest.
pub fn evaluate_detections(
    per_image: &BTreeMap<u64, Vec<Detection>>,
    manifest: &DatasetManifest,
) -> Result<EvalReport> {
    if manifest.entries.is_empty() || manifest.total_annotations() == 0 {
        return Err(CoreError::InvalidInput("empty dataset".into()));
    }
    let num_classes = manifest.class_names.len();
    let mut per_class_ap = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut counts = EvalCounts {
        gt: 0,
        detections: 0,
        matched: 0,
    };
    let mut ap_sum = 0.0;
    let mut ap_classes = 0usize;
    for class_index in 0..num_classes {
        let gts: Vec<(u64, BoxPx)> = manifest
            .entries
            .iter()
            .flat_map(|e| {
                e.annotations
                    .iter()
                    .filter(|a| a.class_index == class_index)
                    .map(move |a| (e.image_id, a.bbox))
            })
            .collect();
        let dets: Vec<ScoredBox> = manifest
            .entries
            .iter()
            .flat_map(|e| {
                per_image
                    .get(&e.image_id)
                    .into_iter()
                    .flatten()
                    .filter(|d| d.class_index == class_index)
                    .map(move |d| ScoredBox {
                        image_id: e.image_id,
                        score: d.score,
                        bbox: d.bbox,
                    })
            })
            .collect();
        counts.gt += gts.len();
        counts.detections += dets.len();
        if gts.is_empty() {
            skipped.push(manifest.class_names[class_index].clone());
            continue;
        }
        let result = average_precision(&dets, &gts, 0.5);
        counts.matched += result.matched;
        ap_sum += result.ap;
        ap_classes += 1;
        per_class_ap.insert(manifest.class_names[class_index].clone(), result.ap);
    }
    Ok(EvalReport {
        schema: EVAL_REPORT_SCHEMA.into(),
        per_class_ap,
        map50: if ap_classes == 0 {
            0.0
        } else {
            ap_sum / ap_classes as f64
        },
        counts,
        skipped_classes: skipped,
    })
}

/// Run the detector over every image and evaluate.
pub fn evaluate(
    detector: &TinyDetector,
    manifest: &DatasetManifest,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<EvalReport> {
    let mut per_image = BTreeMap::new();
    for entry in &manifest.entries {
        let image = crate::data::load_entry_image(entry)?;
        per_image.insert(entry.image_id, detector.predict(&image, score_threshold, nms_iou));
    }
    evaluate_detections(&per_image, manifest)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let (mut dx2, mut dy2) = (0.0, 0.0);
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx2 += a * a;
        dy2 += b * b;
    }
    if dx2 == 0.0 || dy2 == 0.0 {
        return 0.0;
    }
    num / (dx2 * dy2).sqrt()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One row of the weight-analysis report.
#[derive(Debug, Clone, Serialize)]
pub struct WeightReportRow {
    pub object_id: u64,
    pub degradation_proxy: Option<f64>,
    pub w_ame: f64,
    pub focal_w: f64,
    pub p_t: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightAnalysis {
    pub rows: Vec<WeightReportRow>,
    /// Rank correlation of each weight against the degradation proxy, over
    /// rows where the proxy exists.
    pub spearman_ame: f64,
    pub spearman_focal: f64,
    pub skipped_rows: usize,
}

/// Join the weight cache with per-object confidence from the final training
/// epoch, compute focal weights `(1-p)^2`, and attach a degradation proxy.
///
/// Proxy preference: the annotation's injected degradation when present,
/// else mean `1 - t` over the box when depth and synthesis provenance are
/// available, else none (real data).
pub fn weight_analysis(
    manifest: &DatasetManifest,
    cache: &WeightCache,
    log: &[EpochRecord],
    provenance: Option<&[ProvenanceRecord]>,
) -> Result<WeightAnalysis> {
    let final_pt: BTreeMap<u64, f64> = log
        .last()
        .map(|r| {
            r.object_pt
                .iter()
                .filter_map(|(k, v)| k.parse().ok().map(|id: u64| (id, *v)))
                .collect()
        })
        .unwrap_or_default();
    weight_analysis_with_confidences(manifest, cache, &final_pt, provenance)
}

/// Same report, but confidences come from replaying a checkpoint (see
/// [`crate::trainer::collect_object_records`]) instead of the training log.
pub fn weight_analysis_from_records(
    manifest: &DatasetManifest,
    cache: &WeightCache,
    records: &[crate::detector::ObjectRecord],
    provenance: Option<&[ProvenanceRecord]>,
) -> Result<WeightAnalysis> {
    let confidences: BTreeMap<u64, f64> = records
        .iter()
        .filter_map(|r| r.p_t.map(|p| (r.annotation_id, p)))
        .collect();
    weight_analysis_with_confidences(manifest, cache, &confidences, provenance)
}

fn weight_analysis_with_confidences(
    manifest: &DatasetManifest,
    cache: &WeightCache,
    final_pt: &BTreeMap<u64, f64>,
    provenance: Option<&[ProvenanceRecord]>,
) -> Result<WeightAnalysis> {
    let beta_by_image: BTreeMap<u64, f64> = provenance
        .into_iter()
        .flatten()
        .map(|p| (p.image_id, p.beta))
        .collect();

    let mut ann_info: BTreeMap<u64, (u64, Option<f64>, BoxPx)> = BTreeMap::new();
    for entry in &manifest.entries {
        for ann in &entry.annotations {
            ann_info.insert(
                ann.annotation_id,
                (entry.image_id, ann.degradation, ann.bbox),
            );
        }
    }

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for rec in &cache.records {
        let Some(p_t) = final_pt.get(&rec.annotation_id).copied() else {
            skipped += 1;
            continue;
        };
        let Some((image_id, degradation, bbox)) = ann_info.get(&rec.annotation_id).copied() else {
            skipped += 1;
            continue;
        };
        let proxy = match degradation {
            Some(g) => Some(g),
            None => mean_one_minus_t(manifest, image_id, &bbox, &beta_by_image),
        };
        rows.push(WeightReportRow {
            object_id: rec.annotation_id,
            degradation_proxy: proxy,
            w_ame: rec.w_ame,
            focal_w: (1.0 - p_t) * (1.0 - p_t),
            p_t,
        });
    }

    let with_proxy: Vec<&WeightReportRow> = rows
        .iter()
        .filter(|r| r.degradation_proxy.is_some())
        .collect();
    let proxies: Vec<f64> = with_proxy
        .iter()
        .map(|r| r.degradation_proxy.unwrap())
        .collect();
    let ames: Vec<f64> = with_proxy.iter().map(|r| r.w_ame).collect();
    let focals: Vec<f64> = with_proxy.iter().map(|r| r.focal_w).collect();
    Ok(WeightAnalysis {
        spearman_ame: spearman(&ames, &proxies),
        spearman_focal: spearman(&focals, &proxies),
        rows,
        skipped_rows: skipped,
    })
}

fn mean_one_minus_t(
    manifest: &DatasetManifest,
    image_id: u64,
    bbox: &BoxPx,
    beta_by_image: &BTreeMap<u64, f64>,
) -> Option<f64> {
    let beta = *beta_by_image.get(&image_id)?;
    let entry = manifest.entry(image_id)?;
    let depth_path = entry.depth_path.as_ref()?;
    let raw = crate::raster::read_depth(Path::new(depth_path)).ok()?;
    let depth = crate::haze::DepthMap::new(raw, depth_path).ok()?;
    let clamped = crate::haze::clamp_depth(&depth, 100.0).ok()?;
    let normalized = crate::haze::normalize_depth(&clamped).ok()?;
    let t = crate::haze::transmission(&normalized, beta).ok()?;
    let x0 = bbox.x.floor().max(0.0) as usize;
    let y0 = bbox.y.floor().max(0.0) as usize;
    let x1 = (bbox.x2().ceil() as usize).min(t.width()).max(x0 + 1);
    let y1 = (bbox.y2().ceil() as usize).min(t.height()).max(y0 + 1);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            acc += 1.0 - t.get(x, y);
            count += 1;
        }
    }
    (count > 0).then(|| acc / count as f64)
}

/// Serialize analysis rows as CSV; a missing proxy becomes an empty field.
pub fn write_weight_csv(analysis: &WeightAnalysis, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "object_id,degradation_proxy,w_ame,focal_w,p_t")?;
    for row in &analysis.rows {
        let proxy = row
            .degradation_proxy
            .map(|g| format!("{g}"))
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{}",
            row.object_id, proxy, row.w_ame, row.focal_w, row.p_t
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, ManifestEntry};

    fn unit_box(x: f64, y: f64) -> BoxPx {
        BoxPx::new(x, y, 10.0, 10.0)
    }

    #[test]
    fn ap_single_perfect_detection() {
        let gts = vec![(1u64, unit_box(0.0, 0.0))];
        let dets = vec![ScoredBox {
            image_id: 1,
            score: 1.0,
            bbox: unit_box(0.0, 0.0),
        }];
        let r = average_precision(&dets, &gts, 0.5);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.matched, 1);
    }

    #[test]
    fn ap_no_detections_is_zero() {
        let gts = vec![(1u64, unit_box(0.0, 0.0))];
        let r = average_precision(&[], &gts, 0.5);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn ap_five_detection_fixture_matches_hand_enumeration() {
        // Scores (.9,.8,.7,.6,.5) with match pattern (TP,FP,TP,FP,TP) over 3
        // GTs. Hand-enumerated PR curve:
        //   recalls  1/3 1/3 2/3 2/3 3/3
        //   precis   1   1/2 2/3 1/2 3/5
        // envelope: 1.0 on (0,1/3], 2/3 on (1/3,2/3], 3/5 on (2/3,1]
        // AP = (1 + 2/3 + 3/5) / 3 = 34/45.
        let gts = vec![
            (1u64, unit_box(0.0, 0.0)),
            (1u64, unit_box(20.0, 0.0)),
            (1u64, unit_box(40.0, 0.0)),
        ];
        let far = unit_box(80.0, 80.0);
        let dets = vec![
            ScoredBox { image_id: 1, score: 0.9, bbox: unit_box(0.0, 0.0) },
            ScoredBox { image_id: 1, score: 0.8, bbox: far },
            ScoredBox { image_id: 1, score: 0.7, bbox: unit_box(20.0, 0.0) },
            ScoredBox { image_id: 1, score: 0.6, bbox: BoxPx::new(80.0, 40.0, 10.0, 10.0) },
            ScoredBox { image_id: 1, score: 0.5, bbox: unit_box(40.0, 0.0) },
        ];
        let r = average_precision(&dets, &gts, 0.5);
        assert!((r.ap - 34.0 / 45.0).abs() < 1e-9, "ap = {}", r.ap);
        assert_eq!(r.matched, 3);
    }

    #[test]
    fn ap_duplicate_low_score_fp_never_increases() {
        let gts = vec![(1u64, unit_box(0.0, 0.0)), (1u64, unit_box(20.0, 0.0))];
        let mut dets = vec![
            ScoredBox { image_id: 1, score: 0.9, bbox: unit_box(0.0, 0.0) },
            ScoredBox { image_id: 1, score: 0.7, bbox: unit_box(20.0, 0.0) },
        ];
        let base = average_precision(&dets, &gts, 0.5).ap;
        dets.push(ScoredBox {
            image_id: 1,
            score: 0.1,
            bbox: unit_box(80.0, 80.0),
        });
        let with_fp = average_precision(&dets, &gts, 0.5).ap;
        assert!(with_fp <= base + 1e-12);
    }

    #[test]
    fn ap_one_to_one_matching() {
        // Two detections on one GT: only one can match.
        let gts = vec![(1u64, unit_box(0.0, 0.0))];
        let dets = vec![
            ScoredBox { image_id: 1, score: 0.9, bbox: unit_box(0.0, 0.0) },
            ScoredBox { image_id: 1, score: 0.8, bbox: unit_box(1.0, 0.0) },
        ];
        let r = average_precision(&dets, &gts, 0.5);
        assert_eq!(r.matched, 1);
    }

    fn manifest_with_boxes() -> DatasetManifest {
        let mut m = DatasetManifest::new("test", vec!["a".into(), "b".into()]);
        m.entries.push(ManifestEntry {
            image_id: 1,
            image_path: "unused.png".into(),
            depth_path: None,
            width: 100,
            height: 100,
            annotations: vec![
                Annotation {
                    annotation_id: 1,
                    class_index: 0,
                    bbox: unit_box(5.0, 5.0),
                    degradation: None,
                },
                Annotation {
                    annotation_id: 2,
                    class_index: 0,
                    bbox: unit_box(50.0, 50.0),
                    degradation: None,
                },
            ],
        });
        m
    }

    #[test]
    fn perfect_replay_scores_one() {
        let manifest = manifest_with_boxes();
        let mut per_image = BTreeMap::new();
        per_image.insert(
            1u64,
            manifest.entries[0]
                .annotations
                .iter()
                .map(|a| Detection {
                    bbox: a.bbox,
                    class_index: a.class_index,
                    score: 1.0,
                })
                .collect::<Vec<_>>(),
        );
        let report = evaluate_detections(&per_image, &manifest).unwrap();
        assert_eq!(report.map50, 1.0);
        assert_eq!(report.counts.matched, 2);
        // Class "b" has no GT: excluded and recorded.
        assert_eq!(report.skipped_classes, vec!["b".to_string()]);
        assert_eq!(report.per_class_ap.len(), 1);
    }

    #[test]
    fn report_invariant_to_image_order() {
        let mut manifest = DatasetManifest::new("test", vec!["a".into()]);
        for (i, x) in [(1u64, 5.0), (2, 40.0), (3, 70.0)] {
            manifest.entries.push(ManifestEntry {
                image_id: i,
                image_path: "unused.png".into(),
                depth_path: None,
                width: 100,
                height: 100,
                annotations: vec![Annotation {
                    annotation_id: i,
                    class_index: 0,
                    bbox: unit_box(x, 5.0),
                    degradation: None,
                }],
            });
        }
        let mut per_image = BTreeMap::new();
        for (i, (score, hit)) in [(0.9, true), (0.6, false), (0.8, true)].iter().enumerate() {
            let id = i as u64 + 1;
            let bbox = if *hit {
                manifest.entries[i].annotations[0].bbox
            } else {
                unit_box(90.0, 90.0)
            };
            per_image.insert(
                id,
                vec![Detection {
                    bbox,
                    class_index: 0,
                    score: *score,
                }],
            );
        }
        let forward = evaluate_detections(&per_image, &manifest).unwrap();
        manifest.entries.reverse();
        let reversed = evaluate_detections(&per_image, &manifest).unwrap();
        assert_eq!(forward.map50, reversed.map50);
        assert_eq!(forward.counts, reversed.counts);
    }

    #[test]
    fn silent_detector_scores_zero() {
        let manifest = manifest_with_boxes();
        let report = evaluate_detections(&BTreeMap::new(), &manifest).unwrap();
        assert_eq!(report.map50, 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let m = DatasetManifest::new("test", vec!["a".into()]);
        assert!(evaluate_detections(&BTreeMap::new(), &m).is_err());
    }

    #[test]
    fn spearman_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[8.0, 6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
        // Monotone but nonlinear is still rank-perfect.
        assert!((spearman(&xs, &[0.1, 0.2, 10.0, 1000.0]) - 1.0).abs() < 1e-12);
        // Constant input has no ranking.
        assert_eq!(spearman(&xs, &[5.0, 5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn focal_column_matches_square_formula() {
        for p in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let row = WeightReportRow {
                object_id: 0,
                degradation_proxy: None,
                w_ame: 0.5,
                focal_w: (1.0 - p) * (1.0 - p),
                p_t: p,
            };
            assert!((row.focal_w - (1.0 - p).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_written_with_header_even_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        let analysis = WeightAnalysis {
            rows: vec![],
            spearman_ame: 0.0,
            spearman_focal: 0.0,
            skipped_rows: 0,
        };
        write_weight_csv(&analysis, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "object_id,degradation_proxy,w_ame,focal_w,p_t");
    }
}
