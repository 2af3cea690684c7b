//! The fine-tuning pathway: a small adapter maps the concatenated
//! (visual embedding, ROI feature) to an adapted embedding whose prompt
//! similarities give an offset weight. The adapter is supervised by binary
//! cross-entropy against thresholded detector confidence, and the fused
//! weight is the mean of the frozen-prompt weight and the offset weight.
//!
//! The encoders stay frozen and the detector is untouched: the only
//! parameters updated here are the adapter's two affine layers.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::embedding::Embedding;
use crate::error::{CoreError, Result};
use crate::weights::two_way_softmax;

/// Endpoint clamp for the BCE supervision; the raw loss is undefined at 0/1.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Visual-embedding dimension plus ROI-feature dimension.
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Must equal the text-embedding dimension so adapted similarities are defined.
    pub output_dim: usize,
    pub learning_rate: f64,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(CoreError::Config("adapter dims must be positive".into()));
        }
        // Zero is allowed as a diagnostic setting (frozen adapter).
        if !(self.learning_rate >= 0.0) {
            return Err(CoreError::Config(
                "adapter learning rate must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Flattened per-proposal detector feature for one matched positive proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub values: Vec<f64>,
    pub source_proposal: BoxPx,
    pub iou_with_gt: f64,
}

impl RoiFeature {
    pub fn new(values: Vec<f64>, source_proposal: BoxPx, iou_with_gt: f64) -> Result<Self> {
        if !(iou_with_gt > 0.5) {
            return Err(CoreError::InvalidInput(format!(
                "roi feature requires IoU > 0.5, got {iou_with_gt}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite roi feature".into()));
        }
        Ok(Self {
            values,
            source_proposal,
            iou_with_gt,
        })
    }
}

/// Probability threshold for the soft label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelParams {
    pub theta: f64,
}

impl SoftLabelParams {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(CoreError::Config(format!(
                "theta must lie strictly inside (0,1), got {theta}"
            )));
        }
        Ok(Self { theta })
    }
}

/// Binary adapter target: 0 when the detector is already confident
/// (strictly above theta), 1 otherwise.
pub fn soft_label(p_t: f64, params: &SoftLabelParams) -> Result<u8> {
    if !(0.0..=1.0).contains(&p_t) {
        return Err(CoreError::InvalidInput(format!("p_t {p_t} outside [0,1]")));
    }
    Ok(if p_t > params.theta { 0 } else { 1 })
}

/// Clamped binary cross-entropy between the soft label and the offset weight.
pub fn adapter_loss(u: u8, w_offset: f64) -> f64 {
    debug_assert!(u <= 1, "soft label must be 0 or 1");
    let w = w_offset.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let uf = f64::from(u);
    -(uf * w.ln() + (1.0 - uf) * (1.0 - w).ln())
}

/// Fused weight: arithmetic mean of the prompt weight and the offset weight.
pub fn fame_weight(w_ame: f64, w_offset: f64) -> Result<f64> {
    for (name, w) in [("w_ame", w_ame), ("w_offset", w_offset)] {
        if !(w > 0.0 && w < 1.0) {
            return Err(CoreError::InvalidInput(format!(
                "{name} must lie strictly inside (0,1), got {w}"
            )));
        }
    }
    Ok((w_ame + w_offset) / 2.0)
}

/// Offset weight from an adapted vector and the mutually exclusive text
/// embeddings: softmax of the negative similarity, same stability rules as
/// the prompt weight.
pub fn offset_weight(adapted: &[f64], t_pos: &Embedding, t_neg: &Embedding) -> Result<f64> {
    if adapted.len() != t_pos.dim() || adapted.len() != t_neg.dim() {
        return Err(CoreError::Shape(format!(
            "adapted dim {} vs text dims {}/{}",
            adapted.len(),
            t_pos.dim(),
            t_neg.dim()
        )));
    }
    if adapted.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite adapted vector".into()));
    }
    let sim_pos = crate::util::dot(adapted, t_pos.values());
    let sim_neg = crate::util::dot(adapted, t_neg.values());
    two_way_softmax(sim_neg, sim_pos)
}

/// Two affine layers, each followed by a rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    config: AdapterConfig,
    /// hidden_dim x input_dim, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// output_dim x hidden_dim, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
    step_count: u64,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// One supervision example for the adapter objective. `p_t` is the detector's
/// current confidence for the ground-truth class, treated as a constant.
#[derive(Debug, Clone)]
pub struct AdapterExample {
    pub visual: Embedding,
    pub roi: RoiFeature,
    pub p_t: f64,
    pub t_pos: Embedding,
    pub t_neg: Embedding,
}

impl Adapter {
    pub fn zeros(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let (i, h, o) = (config.input_dim, config.hidden_dim, config.output_dim);
        Ok(Self {
            config,
            w1: vec![0.0; h * i],
            b1: vec![0.0; h],
            w2: vec![0.0; o * h],
            b2: vec![0.0; o],
            step_count: 0,
        })
    }

    /// Seeded small-scale init so the initial offset weight sits near 0.5.
    pub fn seeded(config: AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut adapter = Self::zeros(config)?;
        let s1 = 0.5 / (adapter.config.input_dim as f64).sqrt();
        let s2 = 0.5 / (adapter.config.hidden_dim as f64).sqrt();
        for w in adapter.w1.iter_mut() {
            *w = crate::util::sample_gaussian(rng) * s1;
        }
        for w in adapter.w2.iter_mut() {
            *w = crate::util::sample_gaussian(rng) * s2;
        }
        Ok(adapter)
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn concat_input(&self, visual: &Embedding, roi: &RoiFeature) -> Result<Vec<f64>> {
        if visual.dim() + roi.values.len() != self.config.input_dim {
            return Err(CoreError::Config(format!(
                "adapter input {} + {} does not match configured {}",
                visual.dim(),
                roi.values.len(),
                self.config.input_dim
            )));
        }
        let mut x = Vec::with_capacity(self.config.input_dim);
        x.extend_from_slice(visual.values());
        x.extend_from_slice(&roi.values);
        Ok(x)
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (i, h, o) = (
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.output_dim,
        );
        let mut z1 = vec![0.0; h];
        for r in 0..h {
            z1[r] = self.b1[r] + crate::util::dot(&self.w1[r * i..(r + 1) * i], x);
        }
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let mut z2 = vec![0.0; o];
        for r in 0..o {
            z2[r] = self.b2[r] + crate::util::dot(&self.w2[r * h..(r + 1) * h], &a1);
        }
        let out: Vec<f64> = z2.iter().map(|&z| z.max(0.0)).collect();
        (z1, a1, z2, out)
    }

    /// Deterministic forward pass; output entries are nonnegative because of
    /// the final rectifier.
    pub fn adapt(&self, visual: &Embedding, roi: &RoiFeature) -> Result<Vec<f64>> {
        let x = self.concat_input(visual, roi)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite adapter input".into()));
        }
        Ok(self.forward_cached(&x).3)
    }

    /// Mean BCE loss over a batch and its gradient w.r.t. the adapter
    /// parameters. Detector confidence and the text embeddings are constants.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[AdapterExample],
        labels: &SoftLabelParams,
    ) -> Result<(f64, AdapterGrads)> {
        if batch.is_empty() {
            return Err(CoreError::InvalidInput("empty adapter batch".into()));
        }
        let (i, h, o) = (
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.output_dim,
        );
        let mut grads = AdapterGrads {
            w1: vec![0.0; h * i],
            b1: vec![0.0; h],
            w2: vec![0.0; o * h],
            b2: vec![0.0; o],
        };
        let mut total_loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            if ex.t_pos.dim() != o || ex.t_neg.dim() != o {
                return Err(CoreError::Shape(
                    "text embedding dim does not match adapter output".into(),
                ));
            }
            let x = self.concat_input(&ex.visual, &ex.roi)?;
            let (z1, a1, z2, out) = self.forward_cached(&x);
            let sim_pos = crate::util::dot(&out, ex.t_pos.values());
            let sim_neg = crate::util::dot(&out, ex.t_neg.values());
            let w_raw = two_way_softmax(sim_neg, sim_pos)?;
            let u = soft_label(ex.p_t, labels)?;
            total_loss += adapter_loss(u, w_raw);

            // d(loss)/d(sim_neg - sim_pos) = w - u for the unclamped sigmoid;
            // inside the clamp band the loss is constant.
            let dl_ds = if w_raw <= BCE_EPS || w_raw >= 1.0 - BCE_EPS {
                0.0
            } else {
                w_raw - f64::from(u)
            };
            if dl_ds == 0.0 {
                continue;
            }
            // d(sim_neg - sim_pos)/d(out) = t_neg - t_pos, gated by the final rectifier.
            let mut dz2 = vec![0.0; o];
            for r in 0..o {
                if z2[r] > 0.0 {
                    dz2[r] = dl_ds * (ex.t_neg.values()[r] - ex.t_pos.values()[r]);
                }
            }
            for r in 0..o {
                if dz2[r] != 0.0 {
                    grads.b2[r] += scale * dz2[r];
                    for c in 0..h {
                        grads.w2[r * h + c] += scale * dz2[r] * a1[c];
                    }
                }
            }
            let mut dz1 = vec![0.0; h];
            for c in 0..h {
                if z1[c] > 0.0 {
                    let mut acc = 0.0;
                    for r in 0..o {
                        acc += dz2[r] * self.w2[r * h + c];
                    }
                    dz1[c] = acc;
                }
            }
            for r in 0..h {
                if dz1[r] != 0.0 {
                    grads.b1[r] += scale * dz1[r];
                    for c in 0..i {
                        grads.w1[r * i + c] += scale * dz1[r] * x[c];
                    }
                }
            }
        }
        Ok((total_loss * scale, grads))
    }

    pub fn apply_grads(&mut self, grads: &AdapterGrads, learning_rate: f64) {
        for (p, g) in self.w1.iter_mut().zip(&grads.w1) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.w2.iter_mut().zip(&grads.w2) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= learning_rate * g;
        }
        self.step_count += 1;
    }

    /// All parameters as one flat vector: w1, b1, w2, b2 in order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len();
        if params.len() != expected {
            return Err(CoreError::Shape(format!(
                "expected {expected} adapter params, got {}",
                params.len()
            )));
        }
        let mut offset = 0;
        for section in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let len = section.len();
            section.copy_from_slice(&params[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let doc = serde_json::json!({
            "schema": "adapter-ckpt/v1",
            "adapter": self,
        });
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Adapter> {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.get("schema").and_then(|s| s.as_str()) != Some("adapter-ckpt/v1") {
            return Err(CoreError::Parse(format!(
                "{}: not an adapter checkpoint",
                path.display()
            )));
        }
        let adapter: Adapter = serde_json::from_value(
            doc.get("adapter")
                .cloned()
                .ok_or_else(|| CoreError::Parse("missing adapter payload".into()))?,
        )?;
        adapter.config.validate()?;
        Ok(adapter)
    }
}

/// One gradient step on the mean adapter loss; returns the pre-step loss.
pub fn adapter_step(
    adapter: &mut Adapter,
    batch: &[AdapterExample],
    labels: &SoftLabelParams,
) -> Result<f64> {
    let (loss, grads) = adapter.batch_loss_and_grads(batch, labels)?;
    if !loss.is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite adapter loss {loss} at step {}",
            adapter.step_count
        )));
    }
    let lr = adapter.config.learning_rate;
    adapter.apply_grads(&grads, lr);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn unit(dim: usize, axis: usize) -> Embedding {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Embedding::from_raw(v).unwrap()
    }

    fn example(adapter: &Adapter, seed: u64, p_t: f64) -> AdapterExample {
        let mut rng = seeded_rng(seed, "adapter-example");
        let o = adapter.config().output_dim;
        let vis_dim = o;
        let roi_dim = adapter.config().input_dim - vis_dim;
        let visual = Embedding::from_raw(
            (0..vis_dim)
                .map(|_| crate::util::sample_gaussian(&mut rng))
                .collect(),
        )
        .unwrap();
        let roi = RoiFeature::new(
            (0..roi_dim)
                .map(|_| crate::util::sample_gaussian(&mut rng))
                .collect(),
            BoxPx::new(0.0, 0.0, 8.0, 8.0),
            0.9,
        )
        .unwrap();
        let t_pos = Embedding::from_raw(
            (0..o)
                .map(|_| crate::util::sample_gaussian(&mut rng))
                .collect(),
        )
        .unwrap();
        let t_neg = Embedding::from_raw(
            (0..o)
                .map(|_| crate::util::sample_gaussian(&mut rng))
                .collect(),
        )
        .unwrap();
        AdapterExample {
            visual,
            roi,
            p_t,
            t_pos,
            t_neg,
        }
    }

    fn small_config() -> AdapterConfig {
        AdapterConfig {
            input_dim: 12,
            hidden_dim: 10,
            output_dim: 8,
            learning_rate: 0.05,
        }
    }

    #[test]
    fn zero_adapter_outputs_zero_and_half_offset() {
        let adapter = Adapter::zeros(small_config()).unwrap();
        let ex = example(&adapter, 1, 0.4);
        let out = adapter.adapt(&ex.visual, &ex.roi).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let w = offset_weight(&out, &ex.t_pos, &ex.t_neg).unwrap();
        assert_eq!(w, 0.5);
    }

    #[test]
    fn adapt_output_nonnegative_and_deterministic() {
        let mut rng = seeded_rng(2, "init");
        let adapter = Adapter::seeded(small_config(), &mut rng).unwrap();
        let ex = example(&adapter, 3, 0.4);
        let a = adapter.adapt(&ex.visual, &ex.roi).unwrap();
        let b = adapter.adapt(&ex.visual, &ex.roi).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_like_fixture_recovers_input_slice() {
        // Hidden layer passes through the first input entries, second layer
        // passes through the hidden entries.
        let cfg = AdapterConfig {
            input_dim: 6,
            hidden_dim: 4,
            output_dim: 4,
            learning_rate: 0.01,
        };
        let mut adapter = Adapter::zeros(cfg).unwrap();
        let mut params = adapter.params_flat();
        // w1[r][r] = 1 for r < 4 (row-major hidden x input).
        for r in 0..4 {
            params[r * 6 + r] = 1.0;
        }
        // w2[r][r] = 1, located after w1 (4*6) and b1 (4).
        let w2_base = 4 * 6 + 4;
        for r in 0..4 {
            params[w2_base + r * 4 + r] = 1.0;
        }
        adapter.set_params_flat(&params).unwrap();
        let visual = Embedding::from_raw(vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let roi = RoiFeature::new(vec![0.3, 0.9], BoxPx::new(0.0, 0.0, 4.0, 4.0), 0.8).unwrap();
        let out = adapter.adapt(&visual, &roi).unwrap();
        assert_eq!(out, visual.values().to_vec());
    }

    #[test]
    fn offset_weight_examples() {
        let t_pos = unit(4, 0);
        let t_neg = unit(4, 1);
        // adapted == t_neg, t_pos orthogonal: sims (0, 1).
        let w = offset_weight(t_neg.values(), &t_pos, &t_neg).unwrap();
        assert!((w - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((w - 0.731059).abs() < 1e-6);
        let w0 = offset_weight(&[0.0; 4], &t_pos, &t_neg).unwrap();
        assert_eq!(w0, 0.5);
        assert!(offset_weight(&[f64::NAN; 4], &t_pos, &t_neg).is_err());
        assert!(offset_weight(&[0.0; 3], &t_pos, &t_neg).is_err());
    }

    #[test]
    fn offset_weight_complement_with_swapped_texts() {
        let mut rng = seeded_rng(11, "swap");
        for _ in 0..50 {
            let adapted: Vec<f64> = (0..6).map(|_| crate::util::sample_gaussian(&mut rng)).collect();
            let t_pos = Embedding::from_raw(
                (0..6).map(|_| crate::util::sample_gaussian(&mut rng)).collect(),
            )
            .unwrap();
            let t_neg = Embedding::from_raw(
                (0..6).map(|_| crate::util::sample_gaussian(&mut rng)).collect(),
            )
            .unwrap();
            let w = offset_weight(&adapted, &t_pos, &t_neg).unwrap();
            let w_swap = offset_weight(&adapted, &t_neg, &t_pos).unwrap();
            assert!((w + w_swap - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_label_branches() {
        let theta = SoftLabelParams::new(0.5).unwrap();
        assert_eq!(soft_label(0.7, &theta).unwrap(), 0);
        assert_eq!(soft_label(0.3, &theta).unwrap(), 1);
        // Boundary: the confident branch requires strictly greater.
        assert_eq!(soft_label(0.5, &theta).unwrap(), 1);
        assert!(soft_label(1.2, &theta).is_err());
        assert!(SoftLabelParams::new(1.0).is_err());
    }

    #[test]
    fn soft_label_monotone_non_increasing() {
        let theta = SoftLabelParams::new(0.5).unwrap();
        let mut prev = 1u8;
        for i in 0..=100 {
            let u = soft_label(i as f64 / 100.0, &theta).unwrap();
            assert!(u <= prev);
            prev = u;
        }
    }

    #[test]
    fn adapter_loss_examples() {
        assert!((adapter_loss(1, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(adapter_loss(0, BCE_EPS) < 1e-6);
        assert!(adapter_loss(1, 1.0 - BCE_EPS) < 1e-6);
        assert!(adapter_loss(0, 0.0) >= 0.0);
        assert!(adapter_loss(1, 1.0) >= 0.0);
    }

    #[test]
    fn fame_weight_examples() {
        assert_eq!(fame_weight(0.5, 0.5).unwrap(), 0.5);
        assert_eq!(fame_weight(0.8, 0.2).unwrap(), 0.5);
        for w in [0.1, 0.35, 0.62, 0.99] {
            assert_eq!(fame_weight(w, w).unwrap(), w);
        }
        assert!(fame_weight(0.0, 0.5).is_err());
        assert!(fame_weight(0.5, 1.0).is_err());
    }

    #[test]
    fn fame_weight_bounded_by_inputs() {
        let mut rng = seeded_rng(4, "fame");
        for _ in 0..200 {
            let a: f64 = rng.gen_range(0.01..0.99);
            let b: f64 = rng.gen_range(0.01..0.99);
            let f = fame_weight(a, b).unwrap();
            assert!(f >= a.min(b) && f <= a.max(b));
        }
    }

    #[test]
    fn step_direction_follows_label() {
        let mut rng = seeded_rng(5, "dir");
        let cfg = AdapterConfig {
            learning_rate: 1e-3,
            ..small_config()
        };
        for (seed, u_target) in [(10u64, 1u8), (11, 0)] {
            let mut adapter = Adapter::seeded(cfg.clone(), &mut rng).unwrap();
            // p_t below theta forces u=1, above forces u=0.
            let p_t = if u_target == 1 { 0.2 } else { 0.9 };
            let ex = example(&adapter, seed, p_t);
            let before =
                offset_weight(&adapter.adapt(&ex.visual, &ex.roi).unwrap(), &ex.t_pos, &ex.t_neg)
                    .unwrap();
            adapter_step(&mut adapter, std::slice::from_ref(&ex), &SoftLabelParams::new(0.5).unwrap()).unwrap();
            let after =
                offset_weight(&adapter.adapt(&ex.visual, &ex.roi).unwrap(), &ex.t_pos, &ex.t_neg)
                    .unwrap();
            if u_target == 1 {
                assert!(after >= before, "u=1 step decreased w_offset");
            } else {
                assert!(after <= before, "u=0 step increased w_offset");
            }
        }
    }

    #[test]
    fn repeated_steps_non_increasing_loss() {
        let mut rng = seeded_rng(6, "descent");
        let cfg = AdapterConfig {
            learning_rate: 1e-3,
            ..small_config()
        };
        let mut adapter = Adapter::seeded(cfg, &mut rng).unwrap();
        let batch: Vec<AdapterExample> = (0..6).map(|i| example(&adapter, 100 + i, 0.3)).collect();
        let labels = SoftLabelParams::new(0.5).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..30 {
            let loss = adapter_step(&mut adapter, &batch, &labels).unwrap();
            assert!(loss <= prev + 1e-9, "loss increased: {prev} -> {loss}");
            prev = loss;
        }
    }

    #[test]
    fn satisfied_batch_changes_nothing() {
        // Zero adapter gives w=0.5; after clamping, gradients flow. Instead
        // construct a batch whose sigmoid saturates beyond the clamp.
        let cfg = AdapterConfig {
            input_dim: 4,
            hidden_dim: 2,
            output_dim: 2,
            learning_rate: 0.1,
        };
        let mut adapter = Adapter::zeros(cfg).unwrap();
        let mut params = adapter.params_flat();
        // Route input 0 to output 0 with a huge gain so sim_neg >> sim_pos.
        params[0] = 100.0; // w1[0][0]
        let w2_base = 2 * 4 + 2;
        params[w2_base] = 100.0; // w2[0][0]
        adapter.set_params_flat(&params).unwrap();
        let ex = AdapterExample {
            visual: Embedding::from_raw(vec![1.0, 0.0]).unwrap(),
            roi: RoiFeature::new(vec![0.0, 0.0], BoxPx::new(0.0, 0.0, 2.0, 2.0), 0.9).unwrap(),
            p_t: 0.2, // u = 1, wants w_offset high
            t_pos: unit(2, 1),
            t_neg: unit(2, 0),
        };
        let before = adapter.params_flat();
        let loss = adapter_step(&mut adapter, &[ex], &SoftLabelParams::new(0.5).unwrap()).unwrap();
        assert!(loss < 1e-6);
        assert_eq!(adapter.params_flat(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded_rng(8, "ckpt");
        let adapter = Adapter::seeded(small_config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.json");
        adapter.save(&path).unwrap();
        let back = Adapter::load(&path).unwrap();
        assert_eq!(back, adapter);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(9, "fd");
        let cfg = AdapterConfig {
            input_dim: 10,
            hidden_dim: 8,
            output_dim: 6,
            learning_rate: 0.01,
        };
        let labels = SoftLabelParams::new(0.5).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        let mut attempt = 0;
        while checked < 5 {
            attempt += 1;
            let mut adapter = Adapter::seeded(cfg.clone(), &mut rng).unwrap();
            let ex = example(&adapter, 200 + attempt, if attempt % 2 == 0 { 0.2 } else { 0.9 });
            // Finite differences are meaningless across rectifier kinks; skip
            // draws with near-zero preactivations.
            let x = adapter.concat_input(&ex.visual, &ex.roi).unwrap();
            let (z1, _, z2, _) = adapter.forward_cached(&x);
            if z1.iter().chain(z2.iter()).any(|z| z.abs() < 50.0 * h) {
                continue;
            }
            let (_, grads) = adapter.batch_loss_and_grads(std::slice::from_ref(&ex), &labels).unwrap();
            let mut analytic = Vec::new();
            analytic.extend_from_slice(&grads.w1);
            analytic.extend_from_slice(&grads.b1);
            analytic.extend_from_slice(&grads.w2);
            analytic.extend_from_slice(&grads.b2);
            let base = adapter.params_flat();
            let mut max_abs = 0.0f64;
            for g in &analytic {
                max_abs = max_abs.max(g.abs());
            }
            for (k, &g) in analytic.iter().enumerate() {
                let mut plus = base.clone();
                plus[k] += h;
                adapter.set_params_flat(&plus).unwrap();
                let (lp, _) = adapter.batch_loss_and_grads(std::slice::from_ref(&ex), &labels).unwrap();
                let mut minus = base.clone();
                minus[k] -= h;
                adapter.set_params_flat(&minus).unwrap();
                let (lm, _) = adapter.batch_loss_and_grads(std::slice::from_ref(&ex), &labels).unwrap();
                adapter.set_params_flat(&base).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = max_abs.max(1e-8);
                assert!(
                    (fd - g).abs() / denom < 1e-4,
                    "param {k}: analytic {g} vs fd {fd}"
                );
            }
            checked += 1;
        }
    }
}
