//! Score blending, greedy NMS and top-k selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Default IoU threshold for proposal NMS.
pub const DEFAULT_NMS_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub bbox: BBox,
    pub cls_score: f64,
    pub lq_score: f64,
    pub objectness: f64,
}

impl ScoredProposal {
    /// Build a proposal whose objectness is the `lambda` blend of its scores.
    pub fn blended(bbox: BBox, cls_score: f64, lq_score: f64, lambda: f64) -> Result<Self> {
        Ok(ScoredProposal {
            bbox,
            cls_score,
            lq_score,
            objectness: blend(cls_score, lq_score, lambda)?,
        })
    }

    /// Same proposal re-scored under a different blend weight.
    pub fn reblend(&self, lambda: f64) -> Result<Self> {
        Self::blended(self.bbox, self.cls_score, self.lq_score, lambda)
    }
}

/// `lambda * cls_score + (1 - lambda) * lq_score`.
pub fn blend(cls_score: f64, lq_score: f64, lambda_cls: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_cls) {
        return Err(Error::OutOfRange(format!(
            "lambda_cls {lambda_cls} outside [0, 1]"
        )));
    }
    for (name, v) in [("cls_score", cls_score), ("lq_score", lq_score)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok(lambda_cls * cls_score + (1.0 - lambda_cls) * lq_score)
}

/// Indices of `proposals` ordered by descending objectness, ties by input order.
pub fn rank(proposals: &[ScoredProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| {
        proposals[b]
            .objectness
            .total_cmp(&proposals[a].objectness)
    });
    order
}

/// Greedy non-maximum suppression.
pub fn nms(proposals: &[ScoredProposal], iou_threshold: f64) -> Vec<ScoredProposal> {
    let mut kept: Vec<ScoredProposal> = Vec::new();
    for i in rank(proposals) {
        let p = &proposals[i];
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= iou_threshold) {
            kept.push(*p);
        }
    }
    kept
}

/// The `k` highest-objectness proposals, descending.
pub fn top_k(proposals: &[ScoredProposal], k: usize) -> Vec<ScoredProposal> {
    rank(proposals)
        .into_iter()
        .take(k)
        .map(|i| proposals[i])
        .collect()
}
