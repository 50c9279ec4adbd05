//! Scenes, annotations, class splits and label subsampling.

mod coco;
mod features;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use coco::{
    load_annotations, load_split, parse_annotations, read_predictions, save_annotations,
    save_split, to_coco_json, write_predictions, PredictionRecord,
};
pub use features::{load_features, save_features, FeatureStore, GridSpec};
pub use synth::{synthesize, SynthConfig, SyntheticData};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Class id carried by pseudo-labels, which are class-agnostic.
pub const PSEUDO_CLASS_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: u32,
    pub is_pseudo: bool,
    pub pseudo_score: f64,
}

impl LabeledBox {
    pub fn ground_truth(bbox: BBox, class_id: u32) -> Self {
        LabeledBox {
            bbox,
            class_id,
            is_pseudo: false,
            pseudo_score: 1.0,
        }
    }

    pub fn pseudo(bbox: BBox, score: f64) -> Self {
        LabeledBox {
            bbox,
            class_id: PSEUDO_CLASS_ID,
            is_pseudo: true,
            pseudo_score: score,
        }
    }

    /// Box-regression weight base: 1 for ground truth, the pseudo-score otherwise.
    pub fn target_score(&self) -> f64 {
        if self.is_pseudo {
            self.pseudo_score
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub labels: Vec<LabeledBox>,
}

impl Scene {
    pub fn extent(&self) -> (f64, f64) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn class_universe(&self) -> BTreeSet<u32> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn num_labels(&self) -> usize {
        self.scenes.iter().map(|s| s.labels.len()).sum()
    }

    /// Count of non-pseudo labels.
    pub fn num_original_labels(&self) -> usize {
        self.scenes
            .iter()
            .flat_map(|s| &s.labels)
            .filter(|l| !l.is_pseudo)
            .count()
    }

    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let universe = self.class_universe();
        let mut seen = HashSet::new();
        for s in &self.scenes {
            if !seen.insert(s.id) {
                return Err(Error::Annotation {
                    locus: format!("scene {}", s.id),
                    message: "duplicate scene id".into(),
                });
            }
            for (i, l) in s.labels.iter().enumerate() {
                if !l.is_pseudo && !universe.contains(&l.class_id) {
                    return Err(Error::Annotation {
                        locus: format!("scene {} label {i}", s.id),
                        message: format!("class {} is not a known category", l.class_id),
                    });
                }
                if !l.bbox.is_valid() {
                    return Err(Error::Annotation {
                        locus: format!("scene {} label {i}", s.id),
                        message: format!("invalid box {:?}", l.bbox),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub name: String,
    pub id_class_ids: BTreeSet<u32>,
}

impl SplitConfig {
    pub fn new(name: impl Into<String>, ids: impl IntoIterator<Item = u32>) -> Self {
        SplitConfig {
            name: name.into(),
            id_class_ids: ids.into_iter().collect(),
        }
    }

    pub fn is_id(&self, class_id: u32) -> bool {
        self.id_class_ids.contains(&class_id)
    }
}

/// Result of restricting a dataset to its ID classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    /// Scenes with at least one ID label, carrying only ID labels.
    pub train: Dataset,
    /// OOD labels removed from the kept scenes, by scene id.
    pub withheld: Vec<(u64, LabeledBox)>,
    /// Scenes that had no ID label, with all their labels.
    pub dropped: Vec<Scene>,
}

pub fn apply_split(d: &Dataset, split: &SplitConfig) -> Result<SplitOutcome> {
    if split.id_class_ids.is_empty() {
        return Err(Error::Split(format!("split '{}' has no ID classes", split.name)));
    }
    let universe = d.class_universe();
    if let Some(c) = split.id_class_ids.iter().find(|c| !universe.contains(c)) {
        return Err(Error::Split(format!(
            "split '{}' names class {c}, which the dataset does not define",
            split.name
        )));
    }

    let mut train = Vec::new();
    let mut withheld = Vec::new();
    let mut dropped = Vec::new();
    for s in &d.scenes {
        let (id, ood): (Vec<&LabeledBox>, Vec<&LabeledBox>) =
            s.labels.iter().partition(|l| !l.is_pseudo && split.is_id(l.class_id));
        if id.is_empty() {
            dropped.push(s.clone());
            continue;
        }
        withheld.extend(ood.into_iter().map(|l| (s.id, *l)));
        train.push(Scene {
            labels: id.into_iter().copied().collect(),
            ..s.clone()
        });
    }
    if train.is_empty() {
        return Err(Error::Split(format!(
            "split '{}' leaves no scene with an ID label",
            split.name
        )));
    }
    Ok(SplitOutcome {
        train: Dataset {
            scenes: train,
            categories: d.categories.clone(),
        },
        withheld,
        dropped,
    })
}

/// Half-up rounding used for every fractional label budget.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Keep `round(fraction * count)` labels of every class, chosen uniformly
/// without replacement, then drop scenes left without labels.
pub fn subsample_labels(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (si, s) in d.scenes.iter().enumerate() {
        for (li, l) in s.labels.iter().enumerate() {
            by_class.entry(l.class_id).or_default().push((si, li));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = HashSet::new();
    for members in by_class.values() {
        let n = round_half_up(fraction * members.len() as f64).min(members.len());
        keep.extend(
            index::sample(&mut rng, members.len(), n)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    let scenes = d
        .scenes
        .iter()
        .enumerate()
        .filter_map(|(si, s)| {
            let labels: Vec<_> = s
                .labels
                .iter()
                .enumerate()
                .filter(|(li, _)| keep.contains(&(si, *li)))
                .map(|(_, l)| *l)
                .collect();
            (!labels.is_empty()).then(|| Scene {
                labels,
                ..s.clone()
            })
        })
        .collect();
    Ok(Dataset {
        scenes,
        categories: d.categories.clone(),
    })
}
