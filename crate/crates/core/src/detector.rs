//! Desk-scale two-stage reference detector.
//!
//! A frozen seeded convolutional stem produces a feature map; on top of it
//! sit three trainable heads: an anchor objectness scorer (proposal
//! generator), a class-agnostic box regressor, and a two-layer
//! classification head over ROI-pooled features. The stem stays frozen — the
//! heads are the desk-scale analogue of a detector's trainable layers, and
//! the descriptor/roi-feature interface is what full backends plug into.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, nms, BoxPx};
use crate::error::{CoreError, Result};
use crate::loss::softmax;
use crate::raster::Raster;
use crate::util;

/// Static facts a detector backend reports to the rest of the toolkit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorDescriptor {
    pub backend_id: String,
    pub num_classes: usize,
    pub roi_feature_dim: usize,
}

/// One scored detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxPx,
    pub class_index: usize,
    pub score: f64,
}

/// One ground-truth object with its current training-side state.
#[derive(Debug, Clone)]
pub struct ObjectRecord {
    pub image_id: u64,
    pub annotation_id: u64,
    pub class_index: usize,
    pub gt_box: BoxPx,
    pub matched_roi: Option<crate::adapter::RoiFeature>,
    pub p_t: Option<f64>,
}

/// Dense feature map, indexed (channel, y, x).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn cell_vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDetectorConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub feat_channels: usize,
    pub hidden_dim: usize,
    pub roi_grid: usize,
    pub anchor_sizes: Vec<f64>,
    /// Anchor center pitch in image pixels.
    pub anchor_pitch: usize,
    pub proposals_per_image: usize,
}

impl Default for TinyDetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            stem_channels: 8,
            feat_channels: 12,
            hidden_dim: 48,
            roi_grid: 3,
            anchor_sizes: vec![8.0, 12.0, 18.0, 26.0],
            anchor_pitch: 2,
            proposals_per_image: 64,
        }
    }
}

impl TinyDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.stem_channels == 0
            || self.feat_channels == 0
            || self.hidden_dim == 0
            || self.roi_grid == 0
            || self.anchor_sizes.is_empty()
            || self.anchor_pitch == 0
            || self.proposals_per_image == 0
        {
            return Err(CoreError::Config("detector config has a zero field".into()));
        }
        Ok(())
    }

    pub fn roi_feature_dim(&self) -> usize {
        self.feat_channels * self.roi_grid * self.roi_grid
    }
}

/// Stride of the feature map relative to the image (two stride-2 convs).
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDetector {
    pub config: TinyDetectorConfig,
    // Frozen stem: conv (3 -> stem) and conv (stem -> feat), both 3x3 s2 p1.
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    // Trainable heads.
    rpn_w: Vec<f64>,
    rpn_b: Vec<f64>,
    head_w1: Vec<f64>,
    head_b1: Vec<f64>,
    head_w2: Vec<f64>,
    head_b2: Vec<f64>,
    reg_w: Vec<f64>,
    reg_b: Vec<f64>,
}

/// Gradients for the trainable heads, in parameter shape.
#[derive(Debug, Clone)]
pub struct DetectorGrads {
    pub rpn_w: Vec<f64>,
    pub rpn_b: Vec<f64>,
    pub head_w1: Vec<f64>,
    pub head_b1: Vec<f64>,
    pub head_w2: Vec<f64>,
    pub head_b2: Vec<f64>,
    pub reg_w: Vec<f64>,
    pub reg_b: Vec<f64>,
}

impl TinyDetector {
    pub fn new(config: TinyDetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = util::seeded_rng(seed, "detector-init");
        let g = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| util::sample_gaussian(rng) * scale).collect()
        };
        let (sc, fc) = (config.stem_channels, config.feat_channels);
        let roi_dim = config.roi_feature_dim();
        let hidden = config.hidden_dim;
        let out = config.num_classes + 1;
        let conv1_w = g(&mut rng, sc * 3 * 9, (2.0f64 / (3.0 * 9.0)).sqrt());
        let conv2_w = g(&mut rng, fc * sc * 9, (2.0 / (sc as f64 * 9.0)).sqrt());
        let rpn_w = g(&mut rng, config.anchor_sizes.len() * fc, 1.0 / (fc as f64).sqrt());
        let head_w1 = g(&mut rng, hidden * roi_dim, 1.0 / (roi_dim as f64).sqrt());
        let head_w2 = g(&mut rng, out * hidden, 1.0 / (hidden as f64).sqrt());
        Ok(Self {
            conv1_b: vec![0.0; sc],
            conv2_b: vec![0.0; fc],
            rpn_b: vec![0.0; config.anchor_sizes.len()],
            head_b1: vec![0.0; hidden],
            head_b2: vec![0.0; out],
            reg_w: vec![0.0; 4 * roi_dim],
            reg_b: vec![0.0; 4],
            conv1_w,
            conv2_w,
            rpn_w,
            head_w1,
            head_w2,
            config,
        })
    }

    pub fn descriptor(&self) -> DetectorDescriptor {
        DetectorDescriptor {
            backend_id: "tiny-two-stage/v1".into(),
            num_classes: self.config.num_classes,
            roi_feature_dim: self.config.roi_feature_dim(),
        }
    }

    /// Background class index in the head output.
    pub fn background_index(&self) -> usize {
        self.config.num_classes
    }

    fn conv_forward(
        input: &[f64],
        (in_c, h, w): (usize, usize, usize),
        weights: &[f64],
        bias: &[f64],
        out_c: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 - 3) / 2 + 1;
        let ow = (w + 2 - 3) / 2 + 1;
        let mut out = vec![0.0f64; out_c * oh * ow];
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    let iy0 = (oy * 2) as isize - 1;
                    let ix0 = (ox * 2) as isize - 1;
                    for ic in 0..in_c {
                        for ky in 0..3 {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wv = weights[((oc * in_c + ic) * 3 + ky) * 3 + kx];
                                acc += wv * input[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        (out, oh, ow)
    }

    /// Frozen-stem forward pass.
    pub fn features(&self, image: &Raster) -> FeatureMap {
        let (w, h) = (image.width(), image.height());
        // Planar copy of the interleaved raster.
        let mut planar = vec![0.0f64; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    planar[(c * h + y) * w + x] = image.get(x, y, c);
                }
            }
        }
        let (a1, h1, w1) = Self::conv_forward(
            &planar,
            (3, h, w),
            &self.conv1_w,
            &self.conv1_b,
            self.config.stem_channels,
        );
        let (a2, h2, w2) = Self::conv_forward(
            &a1,
            (self.config.stem_channels, h1, w1),
            &self.conv2_w,
            &self.conv2_b,
            self.config.feat_channels,
        );
        FeatureMap {
            channels: self.config.feat_channels,
            height: h2,
            width: w2,
            data: a2,
        }
    }

    /// Anchor boxes over an image, row-major centers, sizes innermost.
    pub fn anchors(&self, width: usize, height: usize) -> Vec<BoxPx> {
        let pitch = self.config.anchor_pitch;
        let mut out = Vec::new();
        let mut cy = pitch as f64 / 2.0;
        while cy < height as f64 {
            let mut cx = pitch as f64 / 2.0;
            while cx < width as f64 {
                for &s in &self.config.anchor_sizes {
                    out.push(BoxPx::new(cx - s / 2.0, cy - s / 2.0, s, s));
                }
                cx += pitch as f64;
            }
            cy += pitch as f64;
        }
        out
    }

    fn anchor_cell(&self, feat: &FeatureMap, anchor: &BoxPx) -> (usize, usize) {
        let (cx, cy) = anchor.center();
        let fx = ((cx / FEATURE_STRIDE as f64) as usize).min(feat.width - 1);
        let fy = ((cy / FEATURE_STRIDE as f64) as usize).min(feat.height - 1);
        (fy, fx)
    }

    /// Objectness logit per anchor (same order as [`Self::anchors`]).
    pub fn objectness_logits(&self, feat: &FeatureMap, anchors: &[BoxPx]) -> Vec<f64> {
        let fc = self.config.feat_channels;
        let n_sizes = self.config.anchor_sizes.len();
        anchors
            .iter()
            .enumerate()
            .map(|(i, anchor)| {
                let k = i % n_sizes;
                let (fy, fx) = self.anchor_cell(feat, anchor);
                let mut acc = self.rpn_b[k];
                for c in 0..fc {
                    acc += self.rpn_w[k * fc + c] * feat.get(c, fy, fx);
                }
                acc
            })
            .collect()
    }

    /// Average-pool the feature map over a box into a fixed grid and flatten.
    pub fn roi_feature(&self, feat: &FeatureMap, bbox: &BoxPx) -> Vec<f64> {
        let g = self.config.roi_grid;
        let fx0 = bbox.x / FEATURE_STRIDE as f64;
        let fy0 = bbox.y / FEATURE_STRIDE as f64;
        let fw = (bbox.w / FEATURE_STRIDE as f64).max(1e-6);
        let fh = (bbox.h / FEATURE_STRIDE as f64).max(1e-6);
        let mut out = vec![0.0f64; self.config.feat_channels * g * g];
        for gy in 0..g {
            let y_start = fy0 + fh * gy as f64 / g as f64;
            let y_end = fy0 + fh * (gy + 1) as f64 / g as f64;
            let ys = (y_start.floor().max(0.0) as usize).min(feat.height - 1);
            let ye = (y_end.ceil() as usize).clamp(ys + 1, feat.height);
            for gx in 0..g {
                let x_start = fx0 + fw * gx as f64 / g as f64;
                let x_end = fx0 + fw * (gx + 1) as f64 / g as f64;
                let xs = (x_start.floor().max(0.0) as usize).min(feat.width - 1);
                let xe = (x_end.ceil() as usize).clamp(xs + 1, feat.width);
                let count = ((ye - ys) * (xe - xs)) as f64;
                for c in 0..self.config.feat_channels {
                    let mut acc = 0.0;
                    for y in ys..ye {
                        for x in xs..xe {
                            acc += feat.get(c, y, x);
                        }
                    }
                    out[(c * g + gy) * g + gx] = acc / count;
                }
            }
        }
        out
    }

    fn head_forward_cached(&self, roi: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hidden = self.config.hidden_dim;
        let roi_dim = self.config.roi_feature_dim();
        let out_dim = self.config.num_classes + 1;
        let mut z1 = vec![0.0; hidden];
        for r in 0..hidden {
            z1[r] = self.head_b1[r] + util::dot(&self.head_w1[r * roi_dim..(r + 1) * roi_dim], roi);
        }
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let mut logits = vec![0.0; out_dim];
        for r in 0..out_dim {
            logits[r] =
                self.head_b2[r] + util::dot(&self.head_w2[r * hidden..(r + 1) * hidden], &a1);
        }
        (z1, a1, logits)
    }

    /// Class logits over (classes + background) for an ROI feature.
    pub fn class_logits(&self, roi: &[f64]) -> Vec<f64> {
        self.head_forward_cached(roi).2
    }

    pub fn class_probs(&self, roi: &[f64]) -> Vec<f64> {
        softmax(&self.class_logits(roi))
    }

    /// Class-agnostic box deltas (dx, dy, dlog w, dlog h).
    pub fn bbox_deltas(&self, roi: &[f64]) -> [f64; 4] {
        let roi_dim = self.config.roi_feature_dim();
        let mut out = [0.0; 4];
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = self.reg_b[r] + util::dot(&self.reg_w[r * roi_dim..(r + 1) * roi_dim], roi);
        }
        out
    }

    pub fn apply_deltas(proposal: &BoxPx, deltas: &[f64; 4]) -> BoxPx {
        let (pcx, pcy) = proposal.center();
        let cx = pcx + deltas[0] * proposal.w;
        let cy = pcy + deltas[1] * proposal.h;
        let w = proposal.w * deltas[2].clamp(-2.0, 2.0).exp();
        let h = proposal.h * deltas[3].clamp(-2.0, 2.0).exp();
        BoxPx::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn regression_targets(proposal: &BoxPx, gt: &BoxPx) -> [f64; 4] {
        let (pcx, pcy) = proposal.center();
        let (gcx, gcy) = gt.center();
        [
            (gcx - pcx) / proposal.w,
            (gcy - pcy) / proposal.h,
            (gt.w / proposal.w).ln(),
            (gt.h / proposal.h).ln(),
        ]
    }

    /// Top-scoring anchor boxes for an image.
    pub fn propose(&self, feat: &FeatureMap, width: usize, height: usize) -> Vec<BoxPx> {
        let anchors = self.anchors(width, height);
        let logits = self.objectness_logits(feat, &anchors);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| {
            logits[b]
                .partial_cmp(&logits[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
            .into_iter()
            .take(self.config.proposals_per_image)
            .map(|i| anchors[i])
            .collect()
    }

    /// Full inference: propose, refine, classify, filter, class-wise NMS.
    pub fn predict(&self, image: &Raster, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
        let feat = self.features(image);
        let proposals = self.propose(&feat, image.width(), image.height());
        let mut candidates: Vec<Detection> = Vec::new();
        for proposal in &proposals {
            let roi = self.roi_feature(&feat, proposal);
            let refined = Self::apply_deltas(proposal, &self.bbox_deltas(&roi));
            let Some(clipped) = refined.clip_to(image.width() as f64, image.height() as f64)
            else {
                continue;
            };
            let probs = self.class_probs(&roi);
            let (best, score) = probs[..self.config.num_classes]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, &p)| (i, p))
                .unwrap_or((0, 0.0));
            if score >= score_threshold {
                candidates.push(Detection {
                    bbox: clipped,
                    class_index: best,
                    score,
                });
            }
        }
        let mut kept: Vec<Detection> = Vec::new();
        for class_index in 0..self.config.num_classes {
            let class_items: Vec<(usize, f64, BoxPx)> = candidates
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_index == class_index)
                .map(|(i, d)| (i, d.score, d.bbox))
                .collect();
            for idx in nms(&class_items, nms_iou) {
                kept.push(candidates[idx].clone());
            }
        }
        kept.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        kept
    }

    pub fn zero_grads(&self) -> DetectorGrads {
        DetectorGrads {
            rpn_w: vec![0.0; self.rpn_w.len()],
            rpn_b: vec![0.0; self.rpn_b.len()],
            head_w1: vec![0.0; self.head_w1.len()],
            head_b1: vec![0.0; self.head_b1.len()],
            head_w2: vec![0.0; self.head_w2.len()],
            head_b2: vec![0.0; self.head_b2.len()],
            reg_w: vec![0.0; self.reg_w.len()],
            reg_b: vec![0.0; self.reg_b.len()],
        }
    }

    /// Backprop a classification-logit gradient into the head parameters.
    pub fn head_backward(&self, roi: &[f64], dlogits: &[f64], grads: &mut DetectorGrads) {
        let hidden = self.config.hidden_dim;
        let roi_dim = self.config.roi_feature_dim();
        let out_dim = self.config.num_classes + 1;
        let (z1, a1, _) = self.head_forward_cached(roi);
        for r in 0..out_dim {
            if dlogits[r] == 0.0 {
                continue;
            }
            grads.head_b2[r] += dlogits[r];
            for c in 0..hidden {
                grads.head_w2[r * hidden + c] += dlogits[r] * a1[c];
            }
        }
        for c in 0..hidden {
            if z1[c] <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for r in 0..out_dim {
                acc += dlogits[r] * self.head_w2[r * hidden + c];
            }
            if acc != 0.0 {
                grads.head_b1[c] += acc;
                for k in 0..roi_dim {
                    grads.head_w1[c * roi_dim + k] += acc * roi[k];
                }
            }
        }
    }

    /// Feature vector at the cell an anchor reads from.
    pub fn anchor_cell_features(&self, feat: &FeatureMap, anchor: &BoxPx) -> Vec<f64> {
        let (fy, fx) = self.anchor_cell(feat, anchor);
        feat.cell_vector(fy, fx)
    }

    /// Backprop an objectness-logit gradient for one anchor, given the cell
    /// feature vector it scored.
    pub fn rpn_backward(
        &self,
        cell_features: &[f64],
        size_index: usize,
        dlogit: f64,
        grads: &mut DetectorGrads,
    ) {
        let fc = self.config.feat_channels;
        grads.rpn_b[size_index] += dlogit;
        for c in 0..fc {
            grads.rpn_w[size_index * fc + c] += dlogit * cell_features[c];
        }
    }

    /// Backprop a box-delta gradient into the regression head.
    pub fn reg_backward(&self, roi: &[f64], ddeltas: &[f64; 4], grads: &mut DetectorGrads) {
        let roi_dim = self.config.roi_feature_dim();
        for r in 0..4 {
            if ddeltas[r] == 0.0 {
                continue;
            }
            grads.reg_b[r] += ddeltas[r];
            for k in 0..roi_dim {
                grads.reg_w[r * roi_dim + k] += ddeltas[r] * roi[k];
            }
        }
    }

    pub fn apply_grads(&mut self, grads: &DetectorGrads, learning_rate: f64) {
        for (p, g) in self.rpn_w.iter_mut().zip(&grads.rpn_w) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.rpn_b.iter_mut().zip(&grads.rpn_b) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.head_w1.iter_mut().zip(&grads.head_w1) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.head_b1.iter_mut().zip(&grads.head_b1) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.head_w2.iter_mut().zip(&grads.head_w2) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.head_b2.iter_mut().zip(&grads.head_b2) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.reg_w.iter_mut().zip(&grads.reg_w) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.reg_b.iter_mut().zip(&grads.reg_b) {
            *p -= learning_rate * g;
        }
    }

    /// Trainable-parameter snapshot, for trajectory comparisons.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for section in [
            &self.rpn_w,
            &self.rpn_b,
            &self.head_w1,
            &self.head_b1,
            &self.head_w2,
            &self.head_b2,
            &self.reg_w,
            &self.reg_b,
        ] {
            out.extend_from_slice(section);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let doc = serde_json::json!({
            "schema": "detector-ckpt/v1",
            "detector": self,
        });
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<TinyDetector> {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.get("schema").and_then(|s| s.as_str()) != Some("detector-ckpt/v1") {
            return Err(CoreError::Parse(format!(
                "{}: not a detector checkpoint",
                path.display()
            )));
        }
        let detector: TinyDetector = serde_json::from_value(
            doc.get("detector")
                .cloned()
                .ok_or_else(|| CoreError::Parse("missing detector payload".into()))?,
        )?;
        detector.config.validate()?;
        Ok(detector)
    }
}

/// Anchor training labels for the proposal scorer.
pub fn rpn_labels(anchors: &[BoxPx], gts: &[BoxPx]) -> Vec<Option<bool>> {
    let mut labels: Vec<Option<bool>> = anchors
        .iter()
        .map(|anchor| {
            let best = gts.iter().map(|gt| iou(anchor, gt)).fold(0.0f64, f64::max);
            if best > 0.5 {
                Some(true)
            } else if best < 0.3 {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    // Every object keeps at least its best anchor positive.
    for gt in gts {
        let mut best_idx = None;
        let mut best_iou = 0.0;
        for (i, anchor) in anchors.iter().enumerate() {
            let ov = iou(anchor, gt);
            if ov > best_iou {
                best_iou = ov;
                best_idx = Some(i);
            }
        }
        if let Some(i) = best_idx {
            labels[i] = Some(true);
        }
    }
    labels
}

/// Numerically stable logistic loss and its logit gradient.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let sigma = 1.0 / (1.0 + (-logit).exp());
    (loss, sigma - target)
}

/// Smooth-L1 per coordinate: value and derivative.
pub fn smooth_l1(diff: f64) -> (f64, f64) {
    if diff.abs() < 1.0 {
        (0.5 * diff * diff, diff)
    } else {
        (diff.abs() - 0.5, diff.signum())
    }
}

/// Sample up to `limit` indices from `pool` without replacement, seeded.
pub fn sample_indices(pool: &[usize], limit: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() <= limit {
        return pool.to_vec();
    }
    let mut pool = pool.to_vec();
    for i in 0..limit {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(limit);
    pool
}
