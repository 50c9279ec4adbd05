//! Anchor grid generation and per-head target assignment.
//!
//! The CLS head is trained discriminatively on a sampled mix of positive and
//! negative anchors. The LQ head only sees positively matched anchors, each
//! carrying a localization-quality target.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledBox;
use crate::error::{Error, Result};
use crate::geometry::{centerness, iou, BBox};

/// One square anchor per grid location, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<BBox>,
    pub stride: f64,
    pub anchor_size: f64,
    pub scene_extent: (f64, f64),
    pub cols: usize,
    pub rows: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn generate_anchors(
    scene_extent: (f64, f64),
    stride: f64,
    anchor_size: f64,
) -> Result<AnchorGrid> {
    let (width, height) = scene_extent;
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::Config(format!(
            "scene extent must be positive, got ({width}, {height})"
        )));
    }
    if !(stride > 0.0) || !(anchor_size > 0.0) {
        return Err(Error::Config(format!(
            "stride ({stride}) and anchor size ({anchor_size}) must be positive"
        )));
    }
    let cols = (width / stride).ceil() as usize;
    let rows = (height / stride).ceil() as usize;
    let mut anchors = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let cx = (c as f64 + 0.5) * stride;
            let cy = (r as f64 + 0.5) * stride;
            anchors.push(BBox::from_center(cx, cy, anchor_size, anchor_size));
        }
    }
    Ok(AnchorGrid {
        anchors,
        stride,
        anchor_size,
        scene_extent,
        cols,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityKind {
    Centerness,
    Iou,
}

impl std::str::FromStr for QualityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "centerness" => Ok(QualityKind::Centerness),
            "iou" => Ok(QualityKind::Iou),
            other => Err(Error::Config(format!("unknown quality kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    pub pos_thr: f64,
    pub neg_thr: f64,
    pub lq_thr: f64,
    pub quality: QualityKind,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy {
            pos_thr: 0.7,
            neg_thr: 0.3,
            lq_thr: 0.3,
            quality: QualityKind::Centerness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClsLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub cls_label: ClsLabel,
    /// Quality target when the anchor is an LQ positive.
    pub lq_target: Option<f64>,
    pub matched_gt: Option<usize>,
    /// Score of the matched label: 1 for ground truth, the pseudo-score for
    /// pseudo-labels, 0 when nothing is matched.
    pub target_score: f64,
}

impl AnchorAssignment {
    pub fn is_lq_positive(&self) -> bool {
        self.lq_target.is_some()
    }
}

/// Match every anchor of `grid` against `labels`.
pub fn assign(
    grid: &AnchorGrid,
    labels: &[LabeledBox],
    policy: &MatchPolicy,
) -> Vec<AnchorAssignment> {
    let n = grid.len();
    let unmatched = AnchorAssignment {
        cls_label: ClsLabel::Negative,
        lq_target: None,
        matched_gt: None,
        target_score: 0.0,
    };
    if labels.is_empty() {
        return vec![unmatched; n];
    }

    // best label per anchor, best IoU per label
    let mut best = vec![(0.0f64, 0usize); n];
    let mut label_best = vec![0.0f64; labels.len()];
    let overlaps: Vec<Vec<f64>> = grid
        .anchors
        .iter()
        .map(|a| labels.iter().map(|l| iou(a, &l.bbox)).collect())
        .collect();
    for (ai, row) in overlaps.iter().enumerate() {
        for (li, &v) in row.iter().enumerate() {
            if v > best[ai].0 {
                best[ai] = (v, li);
            }
            if v > label_best[li] {
                label_best[li] = v;
            }
        }
    }

    overlaps
        .iter()
        .enumerate()
        .map(|(ai, row)| {
            let (max_iou, li) = best[ai];
            let forced = row
                .iter()
                .zip(&label_best)
                .any(|(&v, &lb)| lb > 0.0 && v == lb);
            let cls_label = if max_iou >= policy.pos_thr || forced {
                ClsLabel::Positive
            } else if max_iou < policy.neg_thr {
                ClsLabel::Negative
            } else {
                ClsLabel::Ignore
            };
            let lq_positive = max_iou > 0.0 && (max_iou >= policy.lq_thr || forced);
            if cls_label != ClsLabel::Positive && !lq_positive {
                return AnchorAssignment {
                    cls_label,
                    ..unmatched
                };
            }
            let label = &labels[li];
            let lq_target = lq_positive.then(|| match policy.quality {
                QualityKind::Iou => max_iou,
                QualityKind::Centerness => {
                    let (px, py) = grid.anchors[ai].center();
                    centerness(px, py, &label.bbox)
                }
            });
            AnchorAssignment {
                cls_label,
                lq_target,
                matched_gt: Some(li),
                target_score: label.target_score(),
            }
        })
        .collect()
}

/// Draw the CLS training sample: positives capped at
/// `round(pos_fraction * batch_size)`, the rest filled with negatives.
/// Returned indices are ascending.
pub fn sample_cls(
    assignments: &[AnchorAssignment],
    batch_size: usize,
    pos_fraction: f64,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "cls batch size must be at least 2, got {batch_size}"
        )));
    }
    if !(pos_fraction > 0.0 && pos_fraction < 1.0) {
        return Err(Error::Config(format!(
            "positive fraction must lie in (0, 1), got {pos_fraction}"
        )));
    }
    let of_kind = |kind: ClsLabel| -> Vec<usize> {
        assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.cls_label == kind)
            .map(|(i, _)| i)
            .collect()
    };
    let positives = of_kind(ClsLabel::Positive);
    let negatives = of_kind(ClsLabel::Negative);

    let pos_cap = (pos_fraction * batch_size as f64).round() as usize;
    let num_pos = positives.len().min(pos_cap);
    let num_neg = negatives.len().min(batch_size - num_pos);

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, positives.len(), num_pos)
        .into_iter()
        .map(|i| positives[i])
        .collect();
    picked.extend(
        index::sample(&mut rng, negatives.len(), num_neg)
            .into_iter()
            .map(|i| negatives[i]),
    );
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn gt(b: BBox) -> LabeledBox {
        LabeledBox::ground_truth(b, 1)
    }

    #[test]
    fn grid_enumeration() {
        let g = generate_anchors((20.0, 20.0), 10.0, 10.0).unwrap();
        let centers: Vec<_> = g.anchors.iter().map(|a| a.center()).collect();
        assert_eq!(
            centers,
            vec![(5.0, 5.0), (15.0, 5.0), (5.0, 15.0), (15.0, 15.0)]
        );
        assert!(g.anchors.iter().all(|a| a.width() == 10.0 && a.height() == 10.0));

        assert_eq!(generate_anchors((10.0, 10.0), 10.0, 4.0).unwrap().len(), 1);
        let g = generate_anchors((25.0, 10.0), 10.0, 10.0).unwrap();
        assert_eq!((g.cols, g.rows, g.len()), (3, 1, 3));
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(generate_anchors((0.0, 10.0), 10.0, 10.0).is_err());
        assert!(generate_anchors((-5.0, 10.0), 10.0, 10.0).is_err());
        assert!(generate_anchors((10.0, 10.0), 0.0, 10.0).is_err());
        assert!(generate_anchors((10.0, 10.0), 1.0, -1.0).is_err());
    }

    #[test]
    fn no_labels_means_all_negative() {
        let g = generate_anchors((40.0, 40.0), 10.0, 10.0).unwrap();
        let a = assign(&g, &[], &MatchPolicy::default());
        assert_eq!(a.len(), 16);
        assert!(a
            .iter()
            .all(|x| x.cls_label == ClsLabel::Negative && x.lq_target.is_none()));
    }

    #[test]
    fn exact_match_is_positive_with_unit_iou_quality() {
        let g = generate_anchors((20.0, 20.0), 10.0, 10.0).unwrap();
        let policy = MatchPolicy {
            quality: QualityKind::Iou,
            ..MatchPolicy::default()
        };
        let a = assign(&g, &[gt(g.anchors[3])], &policy);
        assert_eq!(a[3].cls_label, ClsLabel::Positive);
        assert_eq!(a[3].lq_target, Some(1.0));
        assert_eq!(a[3].matched_gt, Some(0));
        assert_eq!(a[3].target_score, 1.0);
    }

    #[test]
    fn argmax_anchor_forced_positive() {
        // Spanning the top row, a label [x0, x1] x [0, 10] has IoU
        // (10 - x0) / x1 with anchor 0 and (x1 - 10) / (20 - x0) with anchor 1.
        // x0 = 20/11, x1 = 150/11 gives 0.6 and 0.2.
        let g = generate_anchors((20.0, 20.0), 10.0, 10.0).unwrap();
        let label = BBox::new(20.0 / 11.0, 0.0, 150.0 / 11.0, 10.0).unwrap();
        let i0 = iou(&g.anchors[0], &label);
        let i1 = iou(&g.anchors[1], &label);
        assert!((i0 - 0.6).abs() < 1e-12, "{i0}");
        assert!((i1 - 0.2).abs() < 1e-12, "{i1}");

        let a = assign(&g, &[gt(label)], &MatchPolicy::default());
        assert_eq!(a[0].cls_label, ClsLabel::Positive);
        assert_eq!(a[1].cls_label, ClsLabel::Negative);
        assert_eq!(a[2].cls_label, ClsLabel::Negative);
        assert_eq!(a[3].cls_label, ClsLabel::Negative);
        assert!(a.iter().all(|x| x.cls_label != ClsLabel::Ignore));
    }

    #[test]
    fn middle_band_is_ignored() {
        let g = generate_anchors((20.0, 10.0), 10.0, 10.0).unwrap();
        // label 1 straddles both anchors at IoU 1/3
        let labels = [gt(g.anchors[0]), gt(BBox::new(5.0, 0.0, 15.0, 10.0).unwrap())];
        let a = assign(&g, &labels, &MatchPolicy::default());
        assert_eq!(a[0].cls_label, ClsLabel::Positive);
        // label 1 has best IoU 1/3 with both anchors; both are forced positive
        assert_eq!(a[1].cls_label, ClsLabel::Positive);

        let g = generate_anchors((30.0, 10.0), 10.0, 10.0).unwrap();
        let labels = [
            gt(g.anchors[0]),
            gt(g.anchors[2]),
            gt(BBox::new(2.0, 0.0, 16.0, 10.0).unwrap()),
        ];
        let a = assign(&g, &labels, &MatchPolicy::default());
        // the wide label reaches 0.5 on anchor 0 and 1/3 on anchor 1
        assert_eq!(a[1].cls_label, ClsLabel::Ignore);
    }

    #[test]
    fn pseudo_score_flows_into_assignment() {
        let g = generate_anchors((20.0, 20.0), 10.0, 10.0).unwrap();
        let label = LabeledBox::pseudo(g.anchors[0], 0.4);
        let a = assign(&g, &[label], &MatchPolicy::default());
        assert_eq!(a[0].target_score, 0.4);
    }

    #[test]
    fn centerness_quality_uses_anchor_center() {
        let g = generate_anchors((20.0, 20.0), 10.0, 10.0).unwrap();
        let label = BBox::new(0.0, 0.0, 12.0, 12.0).unwrap();
        let a = assign(&g, &[gt(label)], &MatchPolicy::default());
        let expected = centerness(5.0, 5.0, &label);
        assert_eq!(a[0].lq_target, Some(expected));
    }

    fn fake(pos: usize, neg: usize, ign: usize) -> Vec<AnchorAssignment> {
        let mk = |cls_label| AnchorAssignment {
            cls_label,
            lq_target: None,
            matched_gt: (cls_label == ClsLabel::Positive).then_some(0),
            target_score: 1.0,
        };
        let mut v = vec![mk(ClsLabel::Positive); pos];
        v.extend(vec![mk(ClsLabel::Negative); neg]);
        v.extend(vec![mk(ClsLabel::Ignore); ign]);
        v
    }

    fn count(a: &[AnchorAssignment], idx: &[usize], kind: ClsLabel) -> usize {
        idx.iter().filter(|&&i| a[i].cls_label == kind).count()
    }

    #[test]
    fn sampler_counts() {
        let a = fake(10, 100, 5);
        let s = sample_cls(&a, 8, 0.5, 1).unwrap();
        assert_eq!(count(&a, &s, ClsLabel::Positive), 4);
        assert_eq!(count(&a, &s, ClsLabel::Negative), 4);

        let a = fake(1, 100, 0);
        let s = sample_cls(&a, 8, 0.5, 1).unwrap();
        assert_eq!(count(&a, &s, ClsLabel::Positive), 1);
        assert_eq!(count(&a, &s, ClsLabel::Negative), 7);

        let a = fake(0, 100, 0);
        let s = sample_cls(&a, 8, 0.5, 1).unwrap();
        assert_eq!(count(&a, &s, ClsLabel::Negative), 8);

        let a = fake(0, 0, 10);
        assert!(sample_cls(&a, 8, 0.5, 1).unwrap().is_empty());
    }

    #[test]
    fn sampler_rejects_bad_config() {
        let a = fake(3, 3, 0);
        assert!(sample_cls(&a, 1, 0.5, 0).is_err());
        assert!(sample_cls(&a, 8, 0.0, 0).is_err());
        assert!(sample_cls(&a, 8, 1.0, 0).is_err());
    }

    #[test]
    fn sampler_deterministic_per_seed() {
        let a = fake(50, 500, 20);
        let s1 = sample_cls(&a, 64, 0.5, 7).unwrap();
        let s2 = sample_cls(&a, 64, 0.5, 7).unwrap();
        let s3 = sample_cls(&a, 64, 0.5, 8).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
        assert_eq!(s1.len(), s3.len());
        let uniq: HashSet<_> = s1.iter().collect();
        assert_eq!(uniq.len(), s1.len());
    }

    fn random_labels() -> impl Strategy<Value = Vec<LabeledBox>> {
        prop::collection::vec(
            (0.0..50.0f64, 0.0..50.0f64, 2.0..30.0f64, 2.0..30.0f64),
            0..6,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| gt(BBox::from_xywh(x, y, w, h)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn assignment_invariants(labels in random_labels(), seed in 0u64..1000) {
            let g = generate_anchors((64.0, 64.0), 8.0, 16.0).unwrap();
            let policy = MatchPolicy::default();
            let a = assign(&g, &labels, &policy);
            prop_assert_eq!(a.len(), g.len());
            for x in &a {
                if x.lq_target.is_some() || x.cls_label == ClsLabel::Positive {
                    prop_assert!(x.matched_gt.is_some());
                    prop_assert_eq!(x.target_score, 1.0);
                }
                // lq_thr >= neg_thr: no LQ positive is a CLS negative
                if x.lq_target.is_some() {
                    prop_assert!(x.cls_label != ClsLabel::Negative);
                    let q = x.lq_target.unwrap();
                    prop_assert!((0.0..=1.0).contains(&q));
                }
            }
            let n_lq = a.iter().filter(|x| x.is_lq_positive()).count();
            prop_assert!(n_lq <= g.len());

            // seeds change the sample, never the labels
            let again = assign(&g, &labels, &policy);
            prop_assert_eq!(&a, &again);
            let s1 = sample_cls(&a, 32, 0.5, seed).unwrap();
            let s2 = sample_cls(&a, 32, 0.5, seed).unwrap();
            prop_assert_eq!(s1, s2);
        }
    }
}
