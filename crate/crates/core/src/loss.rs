//! Classification losses over per-proposal probability vectors.
//!
//! Three variants share one clamping rule so they compare fairly: plain
//! cross-entropy, focal loss, and the weighted cross-entropy whose multiplier
//! `e^{alpha * w}` is driven by the prompt weight during pre-training epochs
//! and by the fused weight afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::weights::{FocalParams, WeightRecord};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// One proposal's class distribution and its target index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutput {
    probs: Vec<f64>,
    gt_index: usize,
}

impl ClassificationOutput {
    /// Validates simplex membership (sum within 1e-5 of one, entries in
    /// [0,1]) and the target index.
    pub fn new(probs: Vec<f64>, gt_index: usize) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::InvalidInput("empty probability vector".into()));
        }
        if gt_index >= probs.len() {
            return Err(CoreError::InvalidInput(format!(
                "gt index {gt_index} out of range for {} classes",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || !(-1e-9..=1.0 + 1e-5).contains(&p) {
                return Err(CoreError::InvalidInput(format!("bad probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(CoreError::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs, gt_index })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn gt_index(&self) -> usize {
        self.gt_index
    }

    /// Predicted probability of the ground-truth class.
    pub fn p_t(&self) -> f64 {
        self.probs[self.gt_index]
    }
}

/// Epoch schedule for the weighted loss: the prompt-weight branch runs for
/// epochs in (0, pretrain_epochs], the fused-weight branch afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipCeSchedule {
    pub alpha1: f64,
    pub alpha2: f64,
    pub pretrain_epochs: usize,
    pub total_epochs: usize,
}

impl ClipCeSchedule {
    pub fn new(alpha1: f64, alpha2: f64, pretrain_epochs: usize, total_epochs: usize) -> Result<Self> {
        let s = Self {
            alpha1,
            alpha2,
            pretrain_epochs,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(CoreError::Config("alphas must be nonnegative".into()));
        }
        if self.pretrain_epochs == 0 || self.pretrain_epochs > self.total_epochs {
            return Err(CoreError::Config(format!(
                "need 0 < pretrain_epochs <= total_epochs, got {} and {}",
                self.pretrain_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Which branch a 1-based epoch falls in; out-of-range epochs error.
    pub fn branch(&self, epoch: usize) -> Result<ScheduleBranch> {
        if epoch == 0 || epoch > self.total_epochs {
            return Err(CoreError::InvalidInput(format!(
                "epoch {epoch} outside (0, {}]",
                self.total_epochs
            )));
        }
        Ok(if epoch <= self.pretrain_epochs {
            ScheduleBranch::Ame
        } else {
            ScheduleBranch::Fame
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleBranch {
    Ame,
    Fame,
}

impl std::fmt::Display for ScheduleBranch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleBranch::Ame => write!(f, "ame"),
            ScheduleBranch::Fame => write!(f, "fame"),
        }
    }
}

fn clamped_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0)
}

/// `-log(p_t)` with the shared clamp.
pub fn ce_loss(out: &ClassificationOutput) -> f64 {
    -clamped_p(out.p_t()).ln()
}

/// `(1 - p_t)^gamma * (-log p_t)`.
pub fn focal_loss(out: &ClassificationOutput, params: &FocalParams) -> f64 {
    (1.0 - out.p_t()).powf(params.gamma) * ce_loss(out)
}

/// The loss multiplier `e^{alpha * w}` for the branch `epoch` falls in.
///
/// Requires the fused weight to be present once the schedule has switched;
/// its absence means the adapter pathway was never run.
pub fn clipce_multiplier(
    weights: &WeightRecord,
    epoch: usize,
    sched: &ClipCeSchedule,
) -> Result<f64> {
    match sched.branch(epoch)? {
        ScheduleBranch::Ame => Ok((sched.alpha1 * weights.w_ame).exp()),
        ScheduleBranch::Fame => {
            let w_fame = weights.w_fame.ok_or_else(|| {
                CoreError::State(format!(
                    "epoch {epoch} is past the pre-training window but object {} has no fused weight",
                    weights.annotation_id
                ))
            })?;
            Ok((sched.alpha2 * w_fame).exp())
        }
    }
}

/// Weighted cross-entropy for one matched object.
pub fn clipce_loss(
    out: &ClassificationOutput,
    weights: &WeightRecord,
    epoch: usize,
    sched: &ClipCeSchedule,
) -> Result<f64> {
    Ok(clipce_multiplier(weights, epoch, sched)? * ce_loss(out))
}

/// One proposal in a detection batch: matched objects carry their weight
/// record, background proposals none.
pub type ProposalClassItem = (ClassificationOutput, Option<WeightRecord>);

/// Mean classification loss over a proposal batch: weighted cross-entropy
/// for matched positives, plain cross-entropy against background for the
/// rest. Weights are defined per ground-truth object only.
pub fn batch_detection_class_loss(
    items: &[ProposalClassItem],
    epoch: usize,
    sched: &ClipCeSchedule,
) -> Result<f64> {
    if items.is_empty() {
        return Err(CoreError::InvalidInput("empty proposal batch".into()));
    }
    let mut total = 0.0;
    for (out, weights) in items {
        total += match weights {
            Some(w) => clipce_loss(out, w, epoch, sched)?,
            None => ce_loss(out),
        };
    }
    Ok(total / items.len() as f64)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Weighted cross-entropy evaluated straight from logits.
pub fn clipce_loss_from_logits(logits: &[f64], gt_index: usize, multiplier: f64) -> f64 {
    let p = softmax(logits);
    multiplier * -clamped_p(p[gt_index]).ln()
}

/// Analytic gradient of [`clipce_loss_from_logits`] w.r.t. the logits, with
/// the multiplier held constant: `m * (softmax - onehot)`.
pub fn clipce_grad_logits(logits: &[f64], gt_index: usize, multiplier: f64) -> Vec<f64> {
    let p = softmax(logits);
    p.iter()
        .enumerate()
        .map(|(k, &pk)| multiplier * (pk - if k == gt_index { 1.0 } else { 0.0 }))
        .collect()
}
