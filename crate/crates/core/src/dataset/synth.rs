// Synthetic desk-scale scenes with per-anchor features.
//
// Every object contributes two things to the anchors around it. The geometry
// block (first five feature dims) is the clipped regression offset from the
// anchor to its best-matching object plus the IoU with it, the same for all
// classes. The signature block sums the per-class unit vectors of objects
// containing the anchor centre. It tells what is there but not how well the
// anchor fits, so a quality head trained on labeled classes must lean on
// geometry, while a classifier can key on the labeled signatures.
// Optional distractors are unlabeled clutter with their own signature.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{FeatureStore, GridSpec};
use super::{Category, Dataset, LabeledBox, Scene, SplitConfig};
use crate::anchors::AnchorGrid;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox};

pub const GEOMETRY_DIMS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: f64,
    pub height: f64,
    pub stride: f64,
    pub anchor_size: f64,
    pub num_id_classes: u32,
    pub num_ood_classes: u32,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Range the per-class mean side length is drawn from.
    pub size_range: (f64, f64),
    /// Per-class aspect ratios are drawn from `[1/a, a]`.
    pub max_aspect: f64,
    /// Log-normal spread of instance sizes around their class mean.
    pub size_jitter: f64,
    /// Objects are placed so no two overlap by more than this IoU.
    pub max_object_overlap: f64,
    pub signature_dims: usize,
    pub signature_gain: f64,
    pub geometry_clip: f64,
    pub geometry_noise: f64,
    pub signature_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128.0,
            height: 128.0,
            stride: 4.0,
            anchor_size: 16.0,
            num_id_classes: 3,
            num_ood_classes: 3,
            train_scenes: 200,
            val_scenes: 100,
            min_instances: 4,
            max_instances: 8,
            min_distractors: 2,
            max_distractors: 4,
            size_range: (10.0, 26.0),
            max_aspect: 1.6,
            size_jitter: 0.15,
            max_object_overlap: 0.1,
            signature_dims: 8,
            signature_gain: 1.0,
            geometry_clip: 1.5,
            geometry_noise: 0.03,
            signature_noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> u32 {
        self.num_id_classes + self.num_ood_classes
    }

    pub fn feature_dim(&self) -> usize {
        GEOMETRY_DIMS + self.signature_dims
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            width: self.width,
            height: self.height,
            stride: self.stride,
            anchor_size: self.anchor_size,
        }
    }

    /// The ID classes are `1..=num_id_classes`.
    pub fn split(&self) -> SplitConfig {
        SplitConfig::new("synthetic", 1..=self.num_id_classes)
    }

    /// Expected (ID, OOD) instance counts over `num_scenes` scenes.
    pub fn expected_instances(&self, num_scenes: usize) -> (f64, f64) {
        let mean = (self.min_instances + self.max_instances) as f64 / 2.0;
        let total = mean * num_scenes as f64;
        let n = self.num_classes() as f64;
        (
            total * self.num_id_classes as f64 / n,
            total * self.num_ood_classes as f64 / n,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic config: {m}")));
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad(format!("extent {} x {} must be positive", self.width, self.height));
        }
        if !(self.stride > 0.0 && self.anchor_size > 0.0) {
            return bad("stride and anchor size must be positive".into());
        }
        if self.num_id_classes == 0 {
            return bad("at least one ID class is required".into());
        }
        if self.train_scenes == 0 {
            return bad("at least one training scene is required".into());
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance range [{}, {}] is empty or allows empty scenes",
                self.min_instances, self.max_instances
            ));
        }
        if self.min_distractors > self.max_distractors {
            return bad("distractor range is empty".into());
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < self.width.min(self.height)) {
            return bad(format!("size range ({lo}, {hi}) does not fit the scene"));
        }
        if !(self.max_aspect >= 1.0) {
            return bad("max aspect must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.max_object_overlap) {
            return bad("max object overlap must lie in [0, 1)".into());
        }
        if self.signature_dims == 0 {
            return bad("signature needs at least one dimension".into());
        }
        for (name, v) in [
            ("size_jitter", self.size_jitter),
            ("signature_gain", self.signature_gain),
            ("geometry_clip", self.geometry_clip),
            ("geometry_noise", self.geometry_noise),
            ("signature_noise", self.signature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub config: SynthConfig,
    /// Full ground truth; apply the split before training.
    pub train: Dataset,
    pub val: Dataset,
    /// Features for train and val scenes; scene ids are disjoint.
    pub features: FeatureStore,
    pub split: SplitConfig,
}

struct ClassShape {
    size: f64,
    aspect: f64,
}

struct Object {
    bbox: BBox,
    /// Index into the signature table.
    signature: usize,
}

pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = cfg.grid_spec();
    let grid = spec.grid()?;

    let n_classes = cfg.num_classes() as usize;
    let shapes: Vec<ClassShape> = (0..n_classes)
        .map(|_| ClassShape {
            size: rng.random_range(cfg.size_range.0..=cfg.size_range.1),
            aspect: cfg.max_aspect.powf(rng.random_range(-1.0..=1.0)),
        })
        .collect();
    // one per class, then the clutter signature
    let signatures: Vec<Vec<f64>> = (0..=n_classes)
        .map(|_| unit_vector(&mut rng, cfg.signature_dims))
        .collect();
    let categories = (1..=cfg.num_classes())
        .map(|id| Category {
            id,
            name: if id <= cfg.num_id_classes {
                format!("id-{id}")
            } else {
                format!("ood-{id}")
            },
        })
        .collect::<Vec<_>>();

    let mut features = FeatureStore::new(spec, cfg.feature_dim());
    let mut make = |count: usize, first_id: u64, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut scenes = Vec::with_capacity(count);
        for k in 0..count {
            let id = first_id + k as u64;
            let (scene, objects) = scene(cfg, &shapes, id, rng);
            features.insert(id, anchor_features(cfg, &grid, &objects, &signatures, rng)?)?;
            scenes.push(scene);
        }
        Ok(Dataset {
            scenes,
            categories: categories.clone(),
        })
    };
    let train = make(cfg.train_scenes, 1, &mut rng)?;
    let val = make(cfg.val_scenes, cfg.train_scenes as u64 + 1, &mut rng)?;
    Ok(SyntheticData {
        config: cfg.clone(),
        train,
        val,
        features,
        split: cfg.split(),
    })
}

fn unit_vector(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn scene(cfg: &SynthConfig, shapes: &[ClassShape], id: u64, rng: &mut ChaCha8Rng) -> (Scene, Vec<Object>) {
    let n_classes = shapes.len();
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    // balanced draw: walk through shuffled copies of the class list
    let mut bag: Vec<usize> = Vec::with_capacity(count);
    while bag.len() < count {
        let mut round: Vec<usize> = (0..n_classes).collect();
        round.shuffle(rng);
        bag.extend(round);
    }
    bag.truncate(count);
    let distractors = rng.random_range(cfg.min_distractors..=cfg.max_distractors);

    let jitter = Normal::new(0.0, cfg.size_jitter.max(1e-12)).expect("finite jitter");
    let mut objects: Vec<Object> = Vec::new();
    let mut labels = Vec::new();
    let clutter_size = (cfg.size_range.0 + cfg.size_range.1) / 2.0;
    let wanted = bag
        .iter()
        .map(|&c| Some(c))
        .chain(std::iter::repeat_n(None, distractors));
    for class in wanted {
        let (size, aspect) = match class {
            Some(c) => (shapes[c].size, shapes[c].aspect),
            None => (clutter_size, cfg.max_aspect.powf(rng.random_range(-1.0..=1.0))),
        };
        for _ in 0..50 {
            let s = size * jitter.sample(rng).exp();
            let w = (s * aspect.sqrt()).clamp(4.0, cfg.width / 2.0);
            let h = (s / aspect.sqrt()).clamp(4.0, cfg.height / 2.0);
            let x = rng.random_range(0.0..=cfg.width - w);
            let y = rng.random_range(0.0..=cfg.height - h);
            let bbox = BBox::from_xywh(x, y, w, h);
            if objects
                .iter()
                .all(|o| iou(&o.bbox, &bbox) <= cfg.max_object_overlap)
            {
                let signature = class.unwrap_or(n_classes);
                objects.push(Object { bbox, signature });
                if let Some(c) = class {
                    labels.push(LabeledBox::ground_truth(bbox, c as u32 + 1));
                }
                break;
            }
        }
    }
    let scene = Scene {
        id,
        width: cfg.width,
        height: cfg.height,
        labels,
    };
    (scene, objects)
}

fn anchor_features(
    cfg: &SynthConfig,
    grid: &AnchorGrid,
    objects: &[Object],
    signatures: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let dim = cfg.feature_dim();
    let geo_noise = Normal::new(0.0, cfg.geometry_noise.max(1e-12)).expect("finite noise");
    let sig_noise = Normal::new(0.0, cfg.signature_noise.max(1e-12)).expect("finite noise");
    let clip = cfg.geometry_clip;
    let mut out = Vec::with_capacity(grid.len() * dim);
    let mut row = vec![0.0f64; dim];
    for anchor in &grid.anchors {
        row.iter_mut().for_each(|v| *v = 0.0);
        let overlaps: Vec<f64> = objects.iter().map(|o| iou(anchor, &o.bbox)).collect();
        let best = overlaps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .or_else(|| nearest_center(anchor, objects));
        match best {
            Some(i) => {
                let d = encode_deltas(anchor, &objects[i].bbox)?.to_array();
                for (r, v) in row.iter_mut().zip(d) {
                    *r = v.clamp(-clip, clip);
                }
                row[4] = overlaps[i];
            }
            None => row[..4].fill(clip),
        }
        // presence only: the signature says what is here, not how well the
        // anchor fits it
        let (cx, cy) = anchor.center();
        for o in objects.iter().filter(|o| o.bbox.contains_point(cx, cy)) {
            let sig = &signatures[o.signature];
            for (r, s) in row[GEOMETRY_DIMS..].iter_mut().zip(sig) {
                *r += cfg.signature_gain * s;
            }
        }
        for (k, v) in row.iter().enumerate() {
            let noise = if k < GEOMETRY_DIMS {
                geo_noise.sample(rng)
            } else {
                sig_noise.sample(rng)
            };
            out.push((v + noise) as f32);
        }
    }
    Ok(out)
}

fn nearest_center(anchor: &BBox, objects: &[Object]) -> Option<usize> {
    let (ax, ay) = anchor.center();
    objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let (ox, oy) = o.bbox.center();
            (i, (ox - ax).powi(2) + (oy - ay).powi(2))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_scenes: 6,
            val_scenes: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize(&small(), 5).unwrap();
        let b = synthesize(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&small(), 6).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn scene_ids_disjoint_and_features_present() {
        let d = synthesize(&small(), 1).unwrap();
        let ids: Vec<u64> = d.train.scenes.iter().chain(&d.val.scenes).map(|s| s.id).collect();
        assert_eq!(ids, (1..=9).collect::<Vec<_>>());
        for id in ids {
            let f = d.features.scene(id).unwrap();
            assert_eq!(f.len(), 1024 * d.config.feature_dim());
            assert!(f.iter().all(|v| v.is_finite()));
        }
        d.train.validate().unwrap();
        d.val.validate().unwrap();
    }

    #[test]
    fn class_counts_near_expectation() {
        let cfg = SynthConfig {
            train_scenes: 50,
            val_scenes: 0,
            ..SynthConfig::default()
        };
        let d = synthesize(&cfg, 11).unwrap();
        let (exp_id, exp_ood) = cfg.expected_instances(50);
        let labels: Vec<_> = d.train.scenes.iter().flat_map(|s| &s.labels).collect();
        let id = labels.iter().filter(|l| cfg.split().is_id(l.class_id)).count() as f64;
        let ood = labels.len() as f64 - id;
        assert!((id - exp_id).abs() <= 0.1 * exp_id, "{id} vs {exp_id}");
        assert!((ood - exp_ood).abs() <= 0.1 * exp_ood, "{ood} vs {exp_ood}");
    }

    #[test]
    fn no_ood_classes() {
        let cfg = SynthConfig {
            num_ood_classes: 0,
            ..small()
        };
        let d = synthesize(&cfg, 2).unwrap();
        assert!(d
            .train
            .scenes
            .iter()
            .flat_map(|s| &s.labels)
            .all(|l| d.split.is_id(l.class_id)));
    }

    #[test]
    fn rejects_degenerate_params() {
        for cfg in [
            SynthConfig { width: 0.0, ..small() },
            SynthConfig { num_id_classes: 0, ..small() },
            SynthConfig { min_instances: 5, max_instances: 2, ..small() },
            SynthConfig { size_range: (0.0, 5.0), ..small() },
            SynthConfig { geometry_noise: f64::NAN, ..small() },
        ] {
            assert!(synthesize(&cfg, 0).is_err());
        }
    }

    #[test]
    fn geometry_encodes_offset_to_object() {
        let cfg = SynthConfig {
            geometry_noise: 0.0,
            signature_noise: 0.0,
            ..small()
        };
        let d = synthesize(&cfg, 3).unwrap();
        let grid = cfg.grid_spec().grid().unwrap();
        let s = &d.train.scenes[0];
        let label = s.labels[0];
        // the anchor overlapping the label most should carry its exact offset
        let (ai, _) = grid
            .anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iou(a, &label.bbox)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let f = d.features.anchor(s.id, ai).unwrap();
        let want = encode_deltas(&grid.anchors[ai], &label.bbox).unwrap().to_array();
        for k in 0..4 {
            assert!((f[k] as f64 - want[k]).abs() < 1e-5);
        }
    }
}
