// COCO-style annotation interchange.
//
// `bbox` is `[x, y, w, h]` with `(x, y)` the top-left corner. Annotations may
// carry `is_pseudo` / `pseudo_score`; pseudo annotations use category 0 and
// need no category entry. Unknown fields are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Category, Dataset, LabeledBox, Scene, SplitConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scoring::ScoredProposal;

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    bbox: [f64; 4],
    category_id: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_pseudo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_score: Option<f64>,
}

pub fn parse_annotations(text: &str) -> Result<Dataset> {
    let file: CocoFile = serde_json::from_str(text)?;
    let known: HashSet<u32> = file.categories.iter().map(|c| c.id).collect();

    let mut scenes: Vec<Scene> = Vec::with_capacity(file.images.len());
    let mut slot = BTreeMap::new();
    for img in &file.images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::Annotation {
                locus: format!("image {}", img.id),
                message: format!("non-positive extent {} x {}", img.width, img.height),
            });
        }
        if slot.insert(img.id, scenes.len()).is_some() {
            return Err(Error::Annotation {
                locus: format!("image {}", img.id),
                message: "duplicate image id".into(),
            });
        }
        scenes.push(Scene {
            id: img.id,
            width: img.width,
            height: img.height,
            labels: Vec::new(),
        });
    }

    for (pos, ann) in file.annotations.iter().enumerate() {
        let locus = match ann.id {
            Some(id) => format!("annotation {id} (image {})", ann.image_id),
            None => format!("annotation #{pos} (image {})", ann.image_id),
        };
        let err = |message: String| Error::Annotation {
            locus: locus.clone(),
            message,
        };
        let [x, y, w, h] = ann.bbox;
        if !ann.bbox.iter().all(|v| v.is_finite()) {
            return Err(err(format!("non-finite bbox {:?}", ann.bbox)));
        }
        if w < 0.0 || h < 0.0 {
            return Err(err(format!("negative width or height in bbox {:?}", ann.bbox)));
        }
        if !ann.is_pseudo && !known.contains(&ann.category_id) {
            return Err(err(format!("unknown category {}", ann.category_id)));
        }
        let Some(&si) = slot.get(&ann.image_id) else {
            return Err(err("references an image that does not exist".into()));
        };
        let bbox = BBox::from_xywh(x, y, w, h);
        let label = if ann.is_pseudo {
            let score = ann.pseudo_score.unwrap_or(1.0);
            if !(0.0..=1.0).contains(&score) {
                return Err(err(format!("pseudo score {score} outside [0, 1]")));
            }
            LabeledBox {
                class_id: ann.category_id,
                ..LabeledBox::pseudo(bbox, score)
            }
        } else {
            LabeledBox::ground_truth(bbox, ann.category_id)
        };
        scenes[si].labels.push(label);
    }

    Ok(Dataset {
        scenes,
        categories: file.categories,
    })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn to_coco_json(d: &Dataset) -> Result<String> {
    let images = d
        .scenes
        .iter()
        .map(|s| CocoImage {
            id: s.id,
            width: s.width,
            height: s.height,
            file_name: None,
        })
        .collect();
    let mut next_id = 1u64;
    let mut annotations = Vec::with_capacity(d.num_labels());
    for s in &d.scenes {
        for l in &s.labels {
            annotations.push(CocoAnnotation {
                id: Some(next_id),
                image_id: s.id,
                bbox: l.bbox.xywh(),
                category_id: l.class_id,
                is_pseudo: l.is_pseudo,
                pseudo_score: l.is_pseudo.then_some(l.pseudo_score),
            });
            next_id += 1;
        }
    }
    let file = CocoFile {
        images,
        annotations,
        categories: d.categories.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_annotations(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_coco_json(d)?).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<SplitConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split: SplitConfig = serde_json::from_str(&text)?;
    if split.id_class_ids.is_empty() {
        return Err(Error::Split(format!("split '{}' has no ID classes", split.name)));
    }
    Ok(split)
}

pub fn save_split(split: &SplitConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(split)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row of the prediction interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: u64,
    /// `[x, y, w, h]`, top-left corner.
    pub bbox: [f64; 4],
    pub cls_score: f64,
    pub lq_score: f64,
    pub objectness: f64,
}

impl PredictionRecord {
    pub fn new(scene_id: u64, p: &ScoredProposal) -> Self {
        PredictionRecord {
            scene_id,
            bbox: p.bbox.xywh(),
            cls_score: p.cls_score,
            lq_score: p.lq_score,
            objectness: p.objectness,
        }
    }

    pub fn proposal(&self) -> ScoredProposal {
        let [x, y, w, h] = self.bbox;
        ScoredProposal {
            bbox: BBox::from_xywh(x, y, w, h),
            cls_score: self.cls_score,
            lq_score: self.lq_score,
            objectness: self.objectness,
        }
    }
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[(u64, Vec<ScoredProposal>)],
) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<_> = predictions
        .iter()
        .flat_map(|(id, ps)| ps.iter().map(move |p| PredictionRecord::new(*id, p)))
        .collect();
    let text = serde_json::to_string(&rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Predictions grouped by scene, in file order.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<u64, Vec<ScoredProposal>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<PredictionRecord> = serde_json::from_str(&text)?;
    let mut out: BTreeMap<u64, Vec<ScoredProposal>> = BTreeMap::new();
    for r in rows {
        out.entry(r.scene_id).or_default().push(r.proposal());
    }
    Ok(out)
}
