//! Training objectives.
//!
//! * grounding loss: NLL of the start and end frames of the original video;
//! * intra-video matching: mean of the per-frame BCE of both videos;
//! * inter-video matching: `KL(c || c̄)` between the softmaxed relevance
//!   scores inside the target moment of the original and pseudo video;
//! * order discrimination: cross-entropy with "original" / "shuffled" labels.
//!
//! The functions here work on plain slices. The training loop uses the fused
//! graph operations in [`crate::graph`], which share the same formulas.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::MomentSpan;
use crate::error::{Error, Result};
use crate::graph::{bce_term, kl_divergence, LOG_EPS};
use crate::model::ORDER_CLASSES;
use crate::tensor::softmax;

/// Class index of videos in their original order.
pub const ORIGINAL: usize = 0;
/// Class index of pseudo (shuffled) videos.
pub const SHUFFLED: usize = 1;

/// Weights of the auxiliary terms: `total = l_g + intra * l_intra + inter * l_inter + order * l_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub intra: f64,
    pub inter: f64,
    pub order: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossWeights {
    pub const FULL: Self = Self {
        intra: 1.0,
        inter: 1.0,
        order: 1.0,
    };
    pub const BASELINE: Self = Self {
        intra: 0.0,
        inter: 0.0,
        order: 0.0,
    };

    /// Loss-term combinations of the seven ablation rows (1 = grounding only,
    /// 7 = all terms).
    pub fn ablation_row(row: usize) -> Result<Self> {
        let (intra, inter, order) = match row {
            1 => (0, 0, 0),
            2 => (1, 0, 0),
            3 => (0, 1, 0),
            4 => (0, 0, 1),
            5 => (1, 0, 1),
            6 => (1, 1, 0),
            7 => (1, 1, 1),
            _ => return Err(Error::Config(alloc::format!("ablation row must be 1..=7, got {row}"))),
        };
        Ok(Self {
            intra: intra as f64,
            inter: inter as f64,
            order: order as f64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.intra), ("lambda2", self.inter), ("lambda3", self.order)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(alloc::format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// True when no auxiliary term is active; the pseudo branch is then skipped.
    pub fn is_baseline(&self) -> bool {
        self.intra == 0.0 && self.inter == 0.0 && self.order == 0.0
    }
}

/// Loss components of one step. Disabled auxiliary terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_g: f64,
    pub l_intra: Option<f64>,
    pub l_inter: Option<f64>,
    pub l_d: Option<f64>,
    pub total: f64,
    pub weights: LossWeights,
}

/// Per-frame relevance targets: 1 inside the span, 0 elsewhere.
pub fn frame_labels(span: &MomentSpan, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| if span.contains_frame(t) { 1.0 } else { 0.0 })
        .collect()
}

/// Summed binary cross-entropy over valid frames.
pub fn bce_relevance(relevance: &[f64], labels: &[f64], mask: &[bool]) -> f64 {
    relevance
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&c, &p), _)| bce_term(c, p))
        .sum()
}

pub fn intra_loss(c_orig: &[f64], p_orig: &[f64], c_pseudo: &[f64], p_pseudo: &[f64]) -> f64 {
    let all = |n: usize| vec![true; n];
    0.5 * (bce_relevance(c_orig, p_orig, &all(c_orig.len()))
        + bce_relevance(c_pseudo, p_pseudo, &all(c_pseudo.len())))
}

/// `KL(softmax(scores_orig[span]) || softmax(scores_pseudo[span_pseudo]))`.
pub fn inter_loss(
    scores_orig: &[f64],
    span_orig: &MomentSpan,
    scores_pseudo: &[f64],
    span_pseudo: &MomentSpan,
) -> Result<f64> {
    if span_orig.frame_len() != span_pseudo.frame_len() {
        return Err(Error::Invariant(alloc::format!(
            "moment lengths differ: {} vs {}",
            span_orig.frame_len(),
            span_pseudo.frame_len()
        )));
    }
    let c = softmax(&scores_orig[span_orig.start_frame..=span_orig.end_frame]);
    let c_bar = softmax(&scores_pseudo[span_pseudo.start_frame..=span_pseudo.end_frame]);
    Ok(kl_divergence(&c, &c_bar))
}

fn cross_entropy(logits: &[f64; ORDER_CLASSES], label: usize) -> f64 {
    -libm::log(softmax(logits)[label].max(LOG_EPS))
}

/// Order-discrimination loss of one triplet. A degenerate triplet has no truly
/// shuffled video, so only the original term counts, at half weight.
pub fn order_loss(orig: &[f64; ORDER_CLASSES], pseudo: &[f64; ORDER_CLASSES], degenerate: bool) -> f64 {
    if degenerate {
        0.5 * cross_entropy(orig, ORIGINAL)
    } else {
        cross_entropy(orig, ORIGINAL) + cross_entropy(pseudo, SHUFFLED)
    }
}

pub fn grounding_loss(start_probs: &[f64], end_probs: &[f64], start: usize, end: usize) -> f64 {
    -libm::log(start_probs[start].max(LOG_EPS)) - libm::log(end_probs[end].max(LOG_EPS))
}

/// Weighted total; a term with positive weight must be present.
pub fn total_loss(
    l_g: f64,
    l_intra: Option<f64>,
    l_inter: Option<f64>,
    l_d: Option<f64>,
    weights: LossWeights,
) -> Result<LossBundle> {
    let check = |name: &str, v: f64| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                component: name.to_string(),
                samples: Vec::new(),
            })
        }
    };
    check("l_g", l_g)?;
    let mut total = l_g;
    for (name, term, w) in [
        ("l_intra", l_intra, weights.intra),
        ("l_inter", l_inter, weights.inter),
        ("l_d", l_d, weights.order),
    ] {
        match term {
            Some(v) => {
                check(name, v)?;
                if w != 0.0 {
                    total += w * v;
                }
            }
            None if w != 0.0 => {
                return Err(Error::Invariant(alloc::format!("{name} has weight {w} but was not computed")));
            }
            None => {}
        }
    }
    check("total", total)?;
    Ok(LossBundle {
        l_g,
        l_intra,
        l_inter,
        l_d,
        total,
        weights,
    })
}
