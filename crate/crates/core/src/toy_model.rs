//! A one-hidden-layer proposal model over per-anchor features, with
//! hand-written backprop and plain SGD.
//!
//! Parameters live in one flat vector: the trunk `W1 (H x D)`, `b1 (H)`, then
//! the head matrix `Wo (6 x H)` and `bo (6)`. Head rows are the CLS logit,
//! the LQ logit and the four box deltas.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign, sample_cls, AnchorAssignment, AnchorGrid, ClsLabel, MatchPolicy};
use crate::dataset::{Dataset, FeatureStore, Scene};
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, encode_deltas, BoxDeltas};
use crate::losses::{
    sigmoid, thpn_loss, BoxRegression, ClsEntry, HeadBatch, LossBreakdown, LossWeights, LqEntry,
};
use crate::scoring::{nms, top_k, ScoredProposal, DEFAULT_NMS_IOU};

const OUTPUTS: usize = 6;
const CLS: usize = 0;
const LQ: usize = 1;
const BOX: usize = 2;

/// Largest predicted log-scale offset, so decoded boxes stay finite.
pub const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub cls_logit: f64,
    pub lq_logit: f64,
    pub deltas: BoxDeltas,
}

struct Activation {
    hidden: Vec<f64>,
    out: [f64; OUTPUTS],
}

impl ToyModel {
    pub fn num_params(input_dim: usize, hidden: usize) -> usize {
        hidden * input_dim + hidden + OUTPUTS * hidden + OUTPUTS
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        ToyModel {
            input_dim,
            hidden,
            params: vec![0.0; Self::num_params(input_dim, hidden)],
        }
    }

    /// Scaled Gaussian init; output biases start at zero.
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "model needs positive dimensions, got input {input_dim}, hidden {hidden}"
            )));
        }
        let mut m = Self::zeros(input_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("positive std");
        let head = Normal::new(0.0, 0.5 / (hidden as f64).sqrt()).expect("positive std");
        let (w1, _) = m.w1_range();
        for p in &mut m.params[w1] {
            *p = trunk.sample(&mut rng);
        }
        let (wo, _) = m.head_range();
        for p in &mut m.params[wo] {
            *p = head.sample(&mut rng);
        }
        Ok(m)
    }

    fn w1_range(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let w = self.hidden * self.input_dim;
        (0..w, w..w + self.hidden)
    }

    fn head_range(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = self.hidden * self.input_dim + self.hidden;
        let w = OUTPUTS * self.hidden;
        (start..start + w, start + w..start + w + OUTPUTS)
    }

    /// Parameter indices that only feed the LQ logit.
    pub fn lq_head_params(&self) -> Vec<usize> {
        let (wo, bo) = self.head_range();
        let row = wo.start + LQ * self.hidden;
        (row..row + self.hidden).chain([bo.start + LQ]).collect()
    }

    /// Parameter indices that only feed the CLS logit.
    pub fn cls_head_params(&self) -> Vec<usize> {
        let (wo, bo) = self.head_range();
        let row = wo.start + CLS * self.hidden;
        (row..row + self.hidden).chain([bo.start + CLS]).collect()
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn activate(&self, x: &[f32]) -> Activation {
        let (d, h) = (self.input_dim, self.hidden);
        let p = &self.params;
        let b1 = h * d;
        let hidden: Vec<f64> = (0..h)
            .map(|k| {
                let row = &p[k * d..(k + 1) * d];
                let z = row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + p[b1 + k];
                z.tanh()
            })
            .collect();
        let (wo, bo) = self.head_range();
        let mut out = [0.0; OUTPUTS];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &p[wo.start + o * h..wo.start + (o + 1) * h];
            *slot = row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>() + p[bo.start + o];
        }
        Activation { hidden, out }
    }

    /// Accumulate `d loss / d params` for one anchor given `d loss / d out`.
    fn backprop(&self, x: &[f32], act: &Activation, g_out: &[f64; OUTPUTS], grad: &mut [f64]) {
        let (d, h) = (self.input_dim, self.hidden);
        let (wo, bo) = self.head_range();
        let b1 = h * d;
        for k in 0..h {
            let mut g_hidden = 0.0;
            for (o, &g) in g_out.iter().enumerate() {
                if g != 0.0 {
                    grad[wo.start + o * h + k] += g * act.hidden[k];
                    g_hidden += g * self.params[wo.start + o * h + k];
                }
            }
            let g_pre = g_hidden * (1.0 - act.hidden[k] * act.hidden[k]);
            if g_pre != 0.0 {
                for (j, &v) in x.iter().enumerate() {
                    grad[k * d + j] += g_pre * v as f64;
                }
                grad[b1 + k] += g_pre;
            }
        }
        for (o, &g) in g_out.iter().enumerate() {
            grad[bo.start + o] += g;
        }
    }

    pub fn forward(&self, x: &[f32]) -> Result<HeadOutput> {
        self.check_dim(x)?;
        let a = self.activate(x);
        Ok(HeadOutput {
            cls_logit: a.out[CLS],
            lq_logit: a.out[LQ],
            deltas: BoxDeltas::from_array([a.out[BOX], a.out[BOX + 1], a.out[BOX + 2], a.out[BOX + 3]]),
        })
    }

    /// Loss of one scene and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        features: &[f32],
        targets: &SceneTargets,
        w: &LossWeights,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let d = self.input_dim;
        let row = |a: usize| -> Result<&[f32]> {
            features
                .get(a * d..(a + 1) * d)
                .ok_or_else(|| Error::OutOfRange(format!("anchor {a} has no feature row")))
        };

        let mut cls_acts = Vec::with_capacity(targets.cls.len());
        let mut batch = HeadBatch::default();
        for t in &targets.cls {
            let act = self.activate(row(t.anchor)?);
            let pred = BoxDeltas::from_array(std::array::from_fn(|k| act.out[BOX + k]));
            batch.cls.push(ClsEntry {
                logit: act.out[CLS],
                target: t.target,
                regression: t.regression.map(|(target, score)| BoxRegression {
                    pred,
                    target,
                    score,
                }),
            });
            cls_acts.push(act);
        }
        let mut lq_acts = Vec::with_capacity(targets.lq.len());
        for t in &targets.lq {
            let act = self.activate(row(t.anchor)?);
            batch.lq.push(LqEntry {
                logit: act.out[LQ],
                target: t.target,
            });
            lq_acts.push(act);
        }

        let loss = thpn_loss(&batch, w);
        let mut grad = vec![0.0; self.params.len()];
        for (i, (t, act)) in targets.cls.iter().zip(&cls_acts).enumerate() {
            let mut g = [0.0; OUTPUTS];
            g[CLS] = loss.gradients.cls_logits[i];
            g[BOX..].copy_from_slice(&loss.gradients.deltas[i]);
            self.backprop(row(t.anchor)?, act, &g, &mut grad);
        }
        for (j, (t, act)) in targets.lq.iter().zip(&lq_acts).enumerate() {
            let mut g = [0.0; OUTPUTS];
            g[LQ] = loss.gradients.lq_logits[j];
            self.backprop(row(t.anchor)?, act, &g, &mut grad);
        }
        Ok((loss, grad))
    }

    /// One SGD step on the mean loss of `batch`. The model is left untouched
    /// when any scene produces a non-finite loss or gradient.
    pub fn train_step(
        &mut self,
        batch: &[(&[f32], &SceneTargets)],
        w: &LossWeights,
        learning_rate: f64,
    ) -> Result<StepSummary> {
        if batch.is_empty() {
            return Ok(StepSummary::default());
        }
        let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
            .par_iter()
            .map(|(f, t)| self.loss_and_grad(f, t, w))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut summary = StepSummary::default();
        for ((_, t), r) in batch.iter().zip(results) {
            let (loss, g) = r?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    scene_id: t.scene_id,
                    loss: loss.total,
                });
            }
            summary.total += scale * loss.total;
            summary.cls_term += scale * loss.cls_term;
            summary.lq_term += scale * loss.lq_term;
            summary.box_term += scale * loss.box_term;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
        for (p, g) in self.params.iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
        Ok(summary)
    }
}

/// Mean loss terms of one step or epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub total: f64,
    pub cls_term: f64,
    pub lq_term: f64,
    pub box_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsTarget {
    pub anchor: usize,
    pub target: f64,
    /// Regression target and matched-label score, for positives.
    pub regression: Option<(BoxDeltas, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqTarget {
    pub anchor: usize,
    pub target: f64,
}

/// Training targets of one scene: the sampled CLS/BOX anchors and every LQ
/// positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneTargets {
    pub scene_id: u64,
    pub cls: Vec<ClsTarget>,
    pub lq: Vec<LqTarget>,
}

impl SceneTargets {
    pub fn from_assignments(
        scene: &Scene,
        grid: &AnchorGrid,
        assignments: &[AnchorAssignment],
        cls_batch_size: usize,
        pos_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let sampled = sample_cls(assignments, cls_batch_size, pos_fraction, seed)?;
        let mut cls = Vec::with_capacity(sampled.len());
        for i in sampled {
            let a = &assignments[i];
            let positive = a.cls_label == ClsLabel::Positive;
            let regression = match (positive, a.matched_gt) {
                (true, Some(li)) => Some((
                    encode_deltas(&grid.anchors[i], &scene.labels[li].bbox)?,
                    a.target_score,
                )),
                _ => None,
            };
            cls.push(ClsTarget {
                anchor: i,
                target: if positive { 1.0 } else { 0.0 },
                regression,
            });
        }
        let lq = assignments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.lq_target.map(|t| LqTarget { anchor: i, target: t }))
            .collect();
        Ok(SceneTargets {
            scene_id: scene.id,
            cls,
            lq,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_scenes: usize,
    pub cls_batch_size: usize,
    pub pos_fraction: f64,
    pub hidden: usize,
    pub weights: LossWeights,
    pub policy: MatchPolicy,
    pub seed: u64,
}

// With one shared SGD step, box weight 10 needs a step so small that the LQ
// head (its focal factor shrinks the gradient) barely moves in 16 epochs.
// Box weight 1 with per-scene steps trains all three heads.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 16,
            batch_scenes: 1,
            cls_batch_size: 256,
            pos_fraction: 0.5,
            hidden: 16,
            weights: LossWeights {
                lambda_box: 1.0,
                ..LossWeights::default()
            },
            policy: MatchPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_scenes == 0 || self.hidden == 0 {
            return Err(Error::Config("batch size and hidden width must be positive".into()));
        }
        if self.cls_batch_size < 2 || !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return Err(Error::Config("cls sampler needs batch >= 2 and fraction in (0, 1)".into()));
        }
        self.weights.validate()
    }
}

/// Scenes with their anchor assignments against a fixed label set.
pub struct TrainingSet<'a> {
    pub grid: &'a AnchorGrid,
    pub features: &'a FeatureStore,
    pub scenes: Vec<(&'a Scene, Vec<AnchorAssignment>)>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(
        dataset: &'a Dataset,
        grid: &'a AnchorGrid,
        features: &'a FeatureStore,
        policy: &MatchPolicy,
    ) -> Result<Self> {
        if features.dim == 0 || features.num_anchors() != grid.len() {
            return Err(Error::Config(format!(
                "feature store covers {} anchors, grid has {}",
                features.num_anchors(),
                grid.len()
            )));
        }
        let scenes = dataset
            .scenes
            .par_iter()
            .map(|s| {
                features.scene(s.id)?;
                Ok((s, assign(grid, &s.labels, policy)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            grid,
            features,
            scenes,
        })
    }
}

/// Deterministic 64-bit mix used to derive per-component seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        // splitmix64 step
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Run one epoch: shuffle scenes, resample CLS anchors, step per batch.
/// `stream` separates seeds across self-training rounds.
pub fn train_epoch(
    model: &mut ToyModel,
    data: &TrainingSet<'_>,
    cfg: &TrainConfig,
    learning_rate: f64,
    stream: u64,
    epoch: usize,
) -> Result<StepSummary> {
    let mut order: Vec<usize> = (0..data.scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, stream, epoch as u64]));
    order.shuffle(&mut rng);

    let targets: Vec<SceneTargets> = order
        .par_iter()
        .map(|&i| {
            let (scene, assignments) = &data.scenes[i];
            SceneTargets::from_assignments(
                scene,
                data.grid,
                assignments,
                cfg.cls_batch_size,
                cfg.pos_fraction,
                mix_seed(&[cfg.seed, stream, epoch as u64, scene.id]),
            )
        })
        .collect::<Result<_>>()?;

    let mut summary = StepSummary::default();
    let mut steps = 0usize;
    for chunk in targets.chunks(cfg.batch_scenes) {
        let batch = chunk
            .iter()
            .map(|t| Ok((data.features.scene(t.scene_id)?, t)))
            .collect::<Result<Vec<_>>>()?;
        let s = model.train_step(&batch, &cfg.weights, learning_rate)?;
        summary.total += s.total;
        summary.cls_term += s.cls_term;
        summary.lq_term += s.lq_term;
        summary.box_term += s.box_term;
        steps += 1;
    }
    if steps > 0 {
        let n = steps as f64;
        summary.total /= n;
        summary.cls_term /= n;
        summary.lq_term /= n;
        summary.box_term /= n;
    }
    Ok(summary)
}

/// Plain supervised training for `cfg.epochs` epochs.
pub fn train(
    model: &mut ToyModel,
    data: &TrainingSet<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<StepSummary>> {
    cfg.validate()?;
    (0..cfg.epochs)
        .map(|e| train_epoch(model, data, cfg, cfg.learning_rate, 0, e))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub lambda_infer: f64,
    pub nms_iou: f64,
    pub max_out: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            lambda_infer: 0.0,
            nms_iou: DEFAULT_NMS_IOU,
            max_out: 1000,
        }
    }
}

/// Score every anchor, decode and clip its box, blend, then NMS and keep
/// the best `max_out`.
pub fn predict(
    model: &ToyModel,
    features: &[f32],
    grid: &AnchorGrid,
    extent: (f64, f64),
    cfg: &PredictConfig,
) -> Result<Vec<ScoredProposal>> {
    let d = model.input_dim;
    if features.len() != grid.len() * d {
        return Err(Error::DimensionMismatch {
            expected: grid.len() * d,
            actual: features.len(),
        });
    }
    let mut proposals = Vec::with_capacity(grid.len());
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let out = model.forward(&features[a * d..(a + 1) * d])?;
        let mut t = out.deltas.to_array();
        t[2] = t[2].min(MAX_LOG_SCALE);
        t[3] = t[3].min(MAX_LOG_SCALE);
        if t.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let bbox = decode_deltas(anchor, &BoxDeltas::from_array(t))?.clip(extent.0, extent.1);
        if !(bbox.area() > 0.0) {
            continue;
        }
        let cls = sigmoid(out.cls_logit);
        let lq = sigmoid(out.lq_logit);
        if !(cls.is_finite() && lq.is_finite()) {
            continue;
        }
        proposals.push(ScoredProposal::blended(bbox, cls, lq, cfg.lambda_infer)?);
    }
    Ok(top_k(&nms(&proposals, cfg.nms_iou), cfg.max_out))
}

/// [`predict`] over every scene of `dataset`, in parallel.
pub fn predict_dataset(
    model: &ToyModel,
    dataset: &Dataset,
    features: &FeatureStore,
    grid: &AnchorGrid,
    cfg: &PredictConfig,
) -> Result<BTreeMap<u64, Vec<ScoredProposal>>> {
    dataset
        .scenes
        .par_iter()
        .map(|s| {
            let f = features.scene(s.id)?;
            Ok((s.id, predict(model, f, grid, s.extent(), cfg)?))
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "thpn-toy-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Blend weight the model was trained with; the default at inference.
    pub lambda_cls: f64,
    pub model: ToyModel,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ToyModel, lambda_cls: f64, meta: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            lambda_cls,
            model,
            meta,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format '{}'", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        let m = &c.model;
        if m.params.len() != ToyModel::num_params(m.input_dim, m.hidden) {
            return Err(Error::Checkpoint(format!(
                "{} parameters do not fit input {} / hidden {}",
                m.params.len(),
                m.input_dim,
                m.hidden
            )));
        }
        Ok(c)
    }
}

/// Random small end-to-end instance for gradient checks: a model, a feature
/// block and scene targets. Box targets sit at least 0.01 from the current
/// predictions so no finite difference straddles an L1 kink.
pub fn random_model_instance(
    seed: u64,
    max_hidden: usize,
    max_anchors: usize,
) -> (ToyModel, Vec<f32>, SceneTargets) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=6);
    let hidden = rng.random_range(1..=max_hidden.max(1));
    let anchors = rng.random_range(1..=max_anchors.max(1));
    let model = ToyModel::new(dim, hidden, rng.random()).expect("positive dims");
    let features: Vec<f32> = (0..anchors * dim)
        .map(|_| rng.random_range(-1.5f32..1.5))
        .collect();

    let mut cls = Vec::new();
    let mut lq = Vec::new();
    for a in 0..anchors {
        let out = model.forward(&features[a * dim..(a + 1) * dim]).expect("dims match");
        if rng.random_bool(0.7) {
            let positive = rng.random_bool(0.5);
            let regression = positive.then(|| {
                let t: [f64; 4] = std::array::from_fn(|k| {
                    let mag = rng.random_range(0.01..0.5);
                    out.deltas.to_array()[k] + if rng.random_bool(0.5) { mag } else { -mag }
                });
                let score = if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.0..1.0) };
                (BoxDeltas::from_array(t), score)
            });
            cls.push(ClsTarget {
                anchor: a,
                target: if positive { 1.0 } else { 0.0 },
                regression,
            });
        }
        if rng.random_bool(0.6) {
            lq.push(LqTarget {
                anchor: a,
                target: rng.random_range(0.0..=1.0),
            });
        }
    }
    (
        model,
        features,
        SceneTargets {
            scene_id: seed,
            cls,
            lq,
        },
    )
}

/// Worst relative error between [`ToyModel::loss_and_grad`] and central
/// differences over every parameter.
pub fn model_grad_check(
    model: &ToyModel,
    features: &[f32],
    targets: &SceneTargets,
    w: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (_, analytic) = model.loss_and_grad(features, targets, w)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let x = model.params[i];
        probe.params[i] = x + epsilon;
        let plus = probe.loss_and_grad(features, targets, w)?.0.total;
        probe.params[i] = x - epsilon;
        let minus = probe.loss_and_grad(features, targets, w)?.0.total;
        probe.params[i] = x;
        let n = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_anchors, QualityKind};
    use crate::dataset::{Category, LabeledBox, SplitConfig};
    use crate::evaluation::{match_recall, default_iou_thresholds};
    use crate::geometry::BBox;

    #[test]
    fn zero_model_outputs() {
        let m = ToyModel::zeros(3, 4);
        let out = m.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(sigmoid(out.cls_logit), 0.5);
        assert_eq!(sigmoid(out.lq_logit), 0.5);
        assert_eq!(out.deltas, BoxDeltas::new(0.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn deterministic_forward() {
        let m = ToyModel::new(5, 8, 3).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 1.0];
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        assert_eq!(m, ToyModel::new(5, 8, 3).unwrap());
        assert!(ToyModel::new(0, 8, 3).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (m, f, t) = random_model_instance(seed, 8, 16);
            let w = LossWeights::default().with_lambda_cls(0.3);
            let err = model_grad_check(&m, &f, &t, &w, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn cls_only_training_leaves_lq_head_alone() {
        let (m, f, t) = random_model_instance(7, 8, 16);
        let w = LossWeights::default().with_lambda_cls(1.0);
        let (_, g) = m.loss_and_grad(&f, &t, &w).unwrap();
        for i in m.lq_head_params() {
            assert_eq!(g[i], 0.0);
        }
    }

    #[test]
    fn no_lq_positives_gives_box_only_update() {
        let (m, f, mut t) = random_model_instance(9, 6, 12);
        t.lq.clear();
        let w = LossWeights::default().with_lambda_cls(0.0);
        let (_, g) = m.loss_and_grad(&f, &t, &w).unwrap();
        for i in m.lq_head_params().into_iter().chain(m.cls_head_params()) {
            assert_eq!(g[i], 0.0);
        }
    }

    #[test]
    fn zero_score_equals_dropped_box_targets() {
        let (m, f, mut t) = random_model_instance(21, 6, 16);
        for c in &mut t.cls {
            if let Some((d, _)) = c.regression {
                c.regression = Some((d, 0.0));
            }
        }
        let mut dropped = t.clone();
        for c in &mut dropped.cls {
            c.regression = None;
        }
        let w = LossWeights::default().with_lambda_cls(0.5);
        let mut a = m.clone();
        let mut b = m.clone();
        a.train_step(&[(&f, &t)], &w, 0.1).unwrap();
        b.train_step(&[(&f, &dropped)], &w, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_steps_descend() {
        let (mut m, f, t) = random_model_instance(4, 8, 16);
        let w = LossWeights::default().with_lambda_cls(0.5);
        let mut last = m.loss_and_grad(&f, &t, &w).unwrap().0.total;
        for _ in 0..10 {
            m.train_step(&[(&f, &t)], &w, 1e-3).unwrap();
            let now = m.loss_and_grad(&f, &t, &w).unwrap().0.total;
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn non_finite_loss_names_scene_and_keeps_model() {
        let (mut m, f, t) = random_model_instance(5, 4, 8);
        m.params[0] = f64::NAN;
        let before = m.clone();
        let err = m
            .train_step(&[(&f, &t)], &LossWeights::default(), 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { scene_id: 5, .. }), "{err}");
        assert_eq!(m.params.len(), before.params.len());
        assert!(m.params[0].is_nan());
        assert_eq!(m.params[1..], before.params[1..]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let c = Checkpoint::new(ToyModel::new(4, 3, 1).unwrap(), 0.25, serde_json::json!({"round": 2}));
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let mut bad = c.clone();
        bad.version = 99;
        bad.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    /// One scene, objects sitting on anchors, features that give each anchor
    /// its offset to the nearest object plus an "inside" flag.
    fn overfit_scene() -> (Dataset, AnchorGrid, FeatureStore) {
        let grid = generate_anchors((32.0, 32.0), 4.0, 8.0).unwrap();
        let boxes = [
            BBox::from_xywh(2.0, 2.0, 8.0, 8.0),
            BBox::from_xywh(18.0, 10.0, 8.0, 8.0),
        ];
        let scene = Scene {
            id: 1,
            width: 32.0,
            height: 32.0,
            labels: boxes.iter().map(|b| LabeledBox::ground_truth(*b, 1)).collect(),
        };
        let mut store = FeatureStore::new(
            crate::dataset::GridSpec { width: 32.0, height: 32.0, stride: 4.0, anchor_size: 8.0 },
            5,
        );
        let mut values = Vec::new();
        for a in &grid.anchors {
            let nearest = boxes
                .iter()
                .max_by(|x, y| {
                    crate::geometry::iou(a, x).total_cmp(&crate::geometry::iou(a, y))
                })
                .unwrap();
            let d = encode_deltas(a, nearest).unwrap().to_array();
            values.extend(d.iter().map(|v| v.clamp(-1.5, 1.5) as f32));
            values.push(crate::geometry::iou(a, nearest) as f32);
        }
        store.insert(1, values).unwrap();
        let d = Dataset {
            scenes: vec![scene],
            categories: vec![Category { id: 1, name: "x".into() }],
        };
        (d, grid, store)
    }

    #[test]
    fn overfit_recovers_scene() {
        let (d, grid, store) = overfit_scene();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 5000,
            batch_scenes: 1,
            cls_batch_size: 32,
            hidden: 16,
            weights: LossWeights { lambda_box: 1.0, ..LossWeights::default().with_lambda_cls(0.5) },
            policy: MatchPolicy { quality: QualityKind::Iou, ..MatchPolicy::default() },
            ..TrainConfig::default()
        };
        let mut m = ToyModel::new(5, cfg.hidden, 0).unwrap();
        let data = TrainingSet::new(&d, &grid, &store, &cfg.policy).unwrap();
        train(&mut m, &data, &cfg).unwrap();
        let pc = PredictConfig { lambda_infer: 0.5, ..PredictConfig::default() };
        let preds = predict_dataset(&m, &d, &store, &grid, &pc).unwrap();
        let gt = crate::evaluation::subset_gt(&d, &SplitConfig::new("x", [1]), crate::evaluation::Subset::All);
        let ar = match_recall(&preds, &gt, 10, &default_iou_thresholds()).unwrap();
        assert_eq!(ar, Some(1.0));
    }
}
