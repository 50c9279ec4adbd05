//! Class-agnostic recall: AR@k over an IoU schedule, its log-k AUC, and
//! per-subset (ID / OOD / ALL) reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SplitConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scoring::{top_k, ScoredProposal};

/// Proposal budgets the AUC integrates over.
pub const AR_KS: [usize; 7] = [10, 30, 50, 100, 300, 500, 1000];

/// 0.50, 0.55, ..., 0.95.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: AR_KS.to_vec(),
            iou_thresholds: default_iou_thresholds(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("every k must be at least 1".into()));
        }
        check_thresholds(&self.iou_thresholds)
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config("IoU threshold schedule is empty".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0, 1)")));
    }
    Ok(())
}

/// Matched GT count of one scene at each threshold, using the scene's top-k
/// predictions. Predictions are visited in score order and each takes the
/// highest-IoU unmatched GT it overlaps by at least the threshold.
pub fn matched_counts(
    predictions: &[ScoredProposal],
    gt: &[BBox],
    k: usize,
    thresholds: &[f64],
) -> Vec<usize> {
    let top = top_k(predictions, k);
    let overlaps: Vec<Vec<f64>> = top
        .iter()
        .map(|p| gt.iter().map(|g| iou(&p.bbox, g)).collect())
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let mut taken = vec![false; gt.len()];
            let mut matched = 0;
            for row in &overlaps {
                let mut best: Option<(usize, f64)> = None;
                for (gi, &v) in row.iter().enumerate() {
                    // strict > keeps the lowest index among equal overlaps
                    if !taken[gi] && v >= t && best.is_none_or(|(_, b)| v > b) {
                        best = Some((gi, v));
                    }
                }
                if let Some((gi, _)) = best {
                    taken[gi] = true;
                    matched += 1;
                }
            }
            matched
        })
        .collect()
}

/// AR@k over all scenes of `gt`; `None` when there is no ground truth.
/// Scenes without predictions contribute misses.
pub fn match_recall(
    predictions: &BTreeMap<u64, Vec<ScoredProposal>>,
    gt: &BTreeMap<u64, Vec<BBox>>,
    k: usize,
    thresholds: &[f64],
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    check_thresholds(thresholds)?;
    let total: usize = gt.values().map(Vec::len).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut matched = vec![0usize; thresholds.len()];
    for (id, boxes) in gt {
        let preds = predictions.get(id).map(Vec::as_slice).unwrap_or(&[]);
        for (m, c) in matched
            .iter_mut()
            .zip(matched_counts(preds, boxes, k, thresholds))
        {
            *m += c;
        }
    }
    let recall_sum: f64 = matched.iter().map(|&m| m as f64 / total as f64).sum();
    Ok(Some(recall_sum / thresholds.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "ALL")]
    All,
}

impl Subset {
    pub const ALL_SUBSETS: [Subset; 3] = [Subset::Id, Subset::Ood, Subset::All];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Id => "ID",
            Subset::Ood => "OOD",
            Subset::All => "ALL",
        }
    }

    pub fn includes(self, split: &SplitConfig, class_id: u32) -> bool {
        match self {
            Subset::Id => split.is_id(class_id),
            Subset::Ood => !split.is_id(class_id),
            Subset::All => true,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ID" => Ok(Subset::Id),
            "OOD" => Ok(Subset::Ood),
            "ALL" => Ok(Subset::All),
            _ => Err(Error::Config(format!("unknown subset '{s}'"))),
        }
    }
}

/// Ground-truth boxes of `subset`, per scene. Pseudo-labels never count.
pub fn subset_gt(gt: &Dataset, split: &SplitConfig, subset: Subset) -> BTreeMap<u64, Vec<BBox>> {
    gt.scenes
        .iter()
        .map(|s| {
            let boxes = s
                .labels
                .iter()
                .filter(|l| !l.is_pseudo && subset.includes(split, l.class_id))
                .map(|l| l.bbox)
                .collect();
            (s.id, boxes)
        })
        .collect()
}

/// AR@k with the ground truth restricted to `subset`; the same predictions
/// serve every subset.
pub fn subset_recall(
    predictions: &BTreeMap<u64, Vec<ScoredProposal>>,
    gt: &Dataset,
    split: &SplitConfig,
    subset: Subset,
    k: usize,
    thresholds: &[f64],
) -> Result<Option<f64>> {
    match_recall(predictions, &subset_gt(gt, split, subset), k, thresholds)
}

/// Trapezoidal area under AR against log10(k) for the seven standard
/// budgets, normalized so a constant curve maps to its constant.
pub fn ar_auc(curve: &BTreeMap<usize, f64>) -> Result<f64> {
    let mut points = Vec::with_capacity(AR_KS.len());
    for k in AR_KS {
        let ar = curve
            .get(&k)
            .ok_or_else(|| Error::Config(format!("AR curve lacks k = {k}")))?;
        points.push(((k as f64).log10(), *ar));
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (points[points.len() - 1].0 - points[0].0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    #[serde(deserialize_with = "k_keys")]
    pub ar: BTreeMap<usize, f64>,
    /// Present when the curve covers every standard budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub num_gt: usize,
    /// Scenes holding at least one ground-truth box of the subset.
    pub num_scenes: usize,
}

// Flattened maps hand integer keys over as strings.
fn k_keys<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<usize, f64>, D::Error> {
    let raw = BTreeMap::<String, f64>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom))
        .collect()
}

/// Recall report; subsets without ground truth are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub subsets: BTreeMap<Subset, SubsetReport>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn get(&self, subset: Subset) -> Option<&SubsetReport> {
        self.subsets.get(&subset)
    }

    pub fn ar(&self, subset: Subset, k: usize) -> Option<f64> {
        self.get(subset).and_then(|r| r.ar.get(&k).copied())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Evaluate shared predictions against every subset of `gt`. `extra` is
/// merged into the report's `config` object.
pub fn evaluate(
    predictions: &BTreeMap<u64, Vec<ScoredProposal>>,
    gt: &Dataset,
    split: &SplitConfig,
    cfg: &EvalConfig,
    extra: serde_json::Value,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut subsets = BTreeMap::new();
    for subset in Subset::ALL_SUBSETS {
        let boxes = subset_gt(gt, split, subset);
        let num_gt: usize = boxes.values().map(Vec::len).sum();
        if num_gt == 0 {
            continue;
        }
        let mut ar = BTreeMap::new();
        for &k in &cfg.ks {
            if let Some(v) = match_recall(predictions, &boxes, k, &cfg.iou_thresholds)? {
                ar.insert(k, v);
            }
        }
        let auc = AR_KS.iter().all(|k| ar.contains_key(k)).then(|| ar_auc(&ar)).transpose()?;
        subsets.insert(
            subset,
            SubsetReport {
                ar,
                auc,
                num_gt,
                num_scenes: boxes.values().filter(|b| !b.is_empty()).count(),
            },
        );
    }
    let mut config = serde_json::to_value(cfg)?;
    if let (Some(obj), serde_json::Value::Object(more)) = (config.as_object_mut(), extra) {
        obj.extend(more);
    }
    Ok(EvalReport { subsets, config })
}
