//! Training objectives.
//!
//! `L_total = L_seg + lambda_MI * L_MI + lambda_dom * L_dom` for source
//! training and the pixel-wise cross-entropy `L_target` for self-training on
//! pseudo-labels. Natural logarithms throughout; probabilities inside logs are
//! floored at [`PROB_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::moe::RoutingStats;
use crate::nn::{log_softmax, softmax};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mi: f64,
    pub lambda_dom: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mi: 0.1,
            lambda_dom: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mi", self.lambda_mi), ("lambda_dom", self.lambda_dom)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GramError::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_mask(mask: &[u8], pixels: usize) -> Result<()> {
    if mask.len() != pixels {
        return Err(GramError::Shape(format!(
            "mask has {} pixels, prediction has {pixels}",
            mask.len()
        )));
    }
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return Err(GramError::Label(format!("mask value {v} not in {{0, 1}}")));
    }
    Ok(())
}

/// Mean over samples and pixels of `-ln p(true class)`.
///
/// `probs[s]` is a channel-major `[2, H, W]` map, `masks[s]` a `{0,1}` `[H, W]` map.
pub fn seg_loss<P: AsRef<[f64]>, M: AsRef<[u8]>>(probs: &[P], masks: &[M]) -> Result<f64> {
    if probs.is_empty() || probs.len() != masks.len() {
        return Err(GramError::Shape(format!(
            "{} probability maps for {} masks",
            probs.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for (p, m) in probs.iter().zip(masks) {
        let (p, m) = (p.as_ref(), m.as_ref());
        let pixels = p.len() / 2;
        check_mask(m, pixels)?;
        let mut s = 0.0;
        for (i, &y) in m.iter().enumerate() {
            s -= p[usize::from(y) * pixels + i].max(PROB_FLOOR).ln();
        }
        total += s / pixels as f64;
    }
    Ok(total / probs.len() as f64)
}

/// Self-training objective on fixed pseudo-masks; same definition as [`seg_loss`].
pub fn target_loss<P: AsRef<[f64]>, M: AsRef<[u8]>>(probs: &[P], pseudo_masks: &[M]) -> Result<f64> {
    seg_loss(probs, pseudo_masks)
}

/// Per-sample pixel cross-entropy from channel-major `[2, H, W]` logits.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn seg_loss_with_grad(logits: &[f64], mask: &[u8]) -> Result<(f64, Vec<f64>)> {
    let pixels = logits.len() / 2;
    check_mask(mask, pixels)?;
    let inv = 1.0 / pixels as f64;
    let floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &y) in mask.iter().enumerate() {
        let (l0, l1) = (logits[i], logits[pixels + i]);
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let lp_true = if y == 1 { l1 - lse } else { l0 - lse };
        if lp_true < floor {
            // Clamped: constant loss, zero gradient.
            loss -= floor;
            continue;
        }
        loss -= lp_true;
        let p1 = (l1 - lse).exp();
        let p0 = 1.0 - p1;
        let y1 = f64::from(y);
        grad[i] = (p0 - (1.0 - y1)) * inv;
        grad[pixels + i] = (p1 - y1) * inv;
    }
    Ok((loss * inv, grad))
}

fn validate_joint(stats: &RoutingStats) -> Result<()> {
    if stats.joint.len() != stats.num_regions * stats.num_experts {
        return Err(GramError::Stats("joint table has wrong size".into()));
    }
    if let Some(v) = stats.joint.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(GramError::Stats(format!("invalid joint entry {v}")));
    }
    let sum: f64 = stats.joint.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(GramError::Stats(format!("joint sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Mutual information `I(d; e)` of one joint table. Zero cells contribute 0.
pub fn mutual_information(stats: &RoutingStats) -> Result<f64> {
    validate_joint(stats)?;
    let pd = stats.region_marginal();
    let pe = stats.expert_marginal();
    let mut mi = 0.0;
    for d in 0..stats.num_regions {
        for e in 0..stats.num_experts {
            let p = stats.get(d, e);
            if p > 0.0 {
                mi += p * (p / (pd[d] * pe[e])).ln();
            }
        }
    }
    Ok(mi)
}

/// `L_MI = -sum_layers I^l(d; e)`.
pub fn mi_loss(stats: &[RoutingStats]) -> Result<f64> {
    let mut total = 0.0;
    for s in stats {
        total -= mutual_information(s)?;
    }
    Ok(total)
}

/// Gradient of [`mi_loss`] with respect to each layer's joint entries.
///
/// `dI/dP(d,e) = ln(P(d,e) / (P(d) P(e))) - 1`; zero cells get zero gradient
/// (they carry no routing mass, so nothing upstream can move them smoothly).
pub fn mi_loss_grad(stats: &[RoutingStats]) -> Result<Vec<Vec<f64>>> {
    stats
        .iter()
        .map(|s| {
            validate_joint(s)?;
            let pd = s.region_marginal();
            let pe = s.expert_marginal();
            let mut g = vec![0.0; s.joint.len()];
            for d in 0..s.num_regions {
                for e in 0..s.num_experts {
                    let p = s.get(d, e);
                    if p > 0.0 {
                        g[d * s.num_experts + e] = -((p / (pd[d] * pe[e])).ln() - 1.0);
                    }
                }
            }
            Ok(g)
        })
        .collect()
}

/// Mean cross-entropy of softmaxed region logits against labels.
pub fn dom_loss<L: AsRef<[f64]>>(logits: &[L], labels: &[usize]) -> Result<f64> {
    Ok(dom_loss_with_grad(logits, labels)?.0)
}

/// [`dom_loss`] together with its gradient with respect to each logit vector.
pub fn dom_loss_with_grad<L: AsRef<[f64]>>(logits: &[L], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(GramError::Shape(format!(
            "{} logit vectors for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &d) in logits.iter().zip(labels) {
        let l = l.as_ref();
        if d >= l.len() {
            return Err(GramError::Label(format!("region label {d} out of range for D = {}", l.len())));
        }
        let lp = log_softmax(l);
        loss -= lp[d].max(PROB_FLOOR.ln());
        let mut g = softmax(l);
        g[d] -= 1.0;
        for v in &mut g {
            *v /= n;
        }
        grads.push(g);
    }
    Ok((loss / n, grads))
}

pub fn total_loss(seg: f64, mi: f64, dom: f64, w: &LossWeights) -> Result<f64> {
    for (component, v) in [("L_seg", seg), ("L_MI", mi), ("L_dom", dom)] {
        if !v.is_finite() {
            return Err(GramError::Loss {
                component: component.into(),
                reason: format!("non-finite value {v}"),
            });
        }
    }
    Ok(seg + w.lambda_mi * mi + w.lambda_dom * dom)
}
