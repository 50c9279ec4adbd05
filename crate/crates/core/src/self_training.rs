//! Train, predict on the training scenes, promote the best non-overlapping
//! predictions to pseudo-labels, fine-tune; repeat.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::dataset::{round_half_up, Dataset, FeatureStore, LabeledBox, SplitConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::geometry::{iou, BBox};
use crate::scoring::{ScoredProposal, DEFAULT_NMS_IOU};
use crate::toy_model::{
    predict_dataset, train_epoch, PredictConfig, StepSummary, ToyModel, TrainConfig, TrainingSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub p_percent: f64,
    pub overlap_discard_iou: f64,
    pub rounds: usize,
    pub initial_epochs: usize,
    pub finetune_epochs: usize,
    /// Fine-tuning learning rate relative to the initial one.
    pub finetune_lr_scale: f64,
    /// Proposals kept per scene when mining pseudo-labels.
    pub proposals_per_scene: usize,
    pub nms_iou: f64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self::with_epochs(16)
    }
}

impl SelfTrainConfig {
    /// Defaults with `initial_epochs = e` and a quarter of that for fine-tuning.
    pub fn with_epochs(e: usize) -> Self {
        SelfTrainConfig {
            p_percent: 30.0,
            overlap_discard_iou: 0.7,
            rounds: 3,
            initial_epochs: e,
            finetune_epochs: (e / 4).max(1),
            finetune_lr_scale: 0.1,
            proposals_per_scene: 100,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.initial_epochs + self.rounds * self.finetune_epochs
    }

    /// Pseudo-label budget for `num_original` ground-truth instances.
    pub fn budget(&self, num_original: usize) -> usize {
        round_half_up(self.p_percent / 100.0 * num_original as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_percent >= 0.0 && self.p_percent.is_finite()) {
            return Err(Error::Config(format!("p must be nonnegative, got {}", self.p_percent)));
        }
        if !(self.overlap_discard_iou > 0.0 && self.overlap_discard_iou <= 1.0) {
            return Err(Error::Config(format!(
                "overlap discard IoU {} outside (0, 1]",
                self.overlap_discard_iou
            )));
        }
        if self.initial_epochs == 0 || self.finetune_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if !(self.finetune_lr_scale > 0.0) {
            return Err(Error::Config("fine-tune learning-rate scale must be positive".into()));
        }
        if self.proposals_per_scene == 0 {
            return Err(Error::Config("proposals per scene must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub score: f64,
    pub round_created: usize,
}

impl PseudoLabel {
    pub fn labeled(&self) -> LabeledBox {
        LabeledBox::pseudo(self.bbox, self.score)
    }
}

/// Discard predictions overlapping any ground truth by more than the
/// configured IoU, pool the rest over the whole dataset, and keep the top
/// `P` by objectness, skipping any that overlap an already kept pseudo-label
/// of the same scene. Ties go to the lower scene id, then input order.
pub fn filter_and_merge(
    predictions: &BTreeMap<u64, Vec<ScoredProposal>>,
    ground_truth: &BTreeMap<u64, Vec<LabeledBox>>,
    cfg: &SelfTrainConfig,
    round: usize,
) -> BTreeMap<u64, Vec<PseudoLabel>> {
    let num_original = ground_truth
        .values()
        .flatten()
        .filter(|l| !l.is_pseudo)
        .count();
    let budget = cfg.budget(num_original);

    let mut pool: Vec<(u64, &ScoredProposal)> = Vec::new();
    for (id, preds) in predictions {
        let gt: Vec<&BBox> = ground_truth
            .get(id)
            .into_iter()
            .flatten()
            .filter(|l| !l.is_pseudo)
            .map(|l| &l.bbox)
            .collect();
        pool.extend(
            preds
                .iter()
                .filter(|p| gt.iter().all(|g| iou(&p.bbox, g) <= cfg.overlap_discard_iou))
                .map(|p| (*id, p)),
        );
    }
    // stable: equal scores keep scene then input order
    pool.sort_by(|a, b| b.1.objectness.total_cmp(&a.1.objectness));

    let mut kept: BTreeMap<u64, Vec<PseudoLabel>> = BTreeMap::new();
    let mut count = 0;
    for (id, p) in pool {
        if count == budget {
            break;
        }
        let scene = kept.entry(id).or_default();
        if scene
            .iter()
            .any(|k| iou(&k.bbox, &p.bbox) > cfg.overlap_discard_iou)
        {
            continue;
        }
        scene.push(PseudoLabel {
            bbox: p.bbox,
            score: p.objectness,
            round_created: round,
        });
        count += 1;
    }
    kept.retain(|_, v| !v.is_empty());
    kept
}

/// Held-out data evaluated after every round.
pub struct EvalTarget<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a SplitConfig,
    pub config: EvalConfig,
    pub predict: PredictConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub num_pseudo: usize,
    pub num_original: usize,
    /// Mean loss of each epoch.
    pub losses: Vec<StepSummary>,
    pub seconds: f64,
    #[serde(skip)]
    pub label_set: Dataset,
    #[serde(skip)]
    pub pseudo_labels: BTreeMap<u64, Vec<PseudoLabel>>,
    #[serde(skip)]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainOutcome {
    pub rounds: Vec<RoundRecord>,
    pub total_epochs: usize,
}

/// Run round 0 on `train` (already split-filtered) and then `st.rounds`
/// self-training rounds, fine-tuning `model` in place. On divergence the
/// model keeps its last good parameters and the error names the round and
/// epoch.
pub fn run_self_training(
    train: &Dataset,
    features: &FeatureStore,
    grid: &AnchorGrid,
    model: &mut ToyModel,
    cfg: &TrainConfig,
    st: &SelfTrainConfig,
    eval: Option<&EvalTarget<'_>>,
) -> Result<SelfTrainOutcome> {
    cfg.validate()?;
    st.validate()?;
    let originals: Dataset = Dataset {
        scenes: train
            .scenes
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.labels.retain(|l| !l.is_pseudo);
                s
            })
            .collect(),
        categories: train.categories.clone(),
    };
    let gt_map: BTreeMap<u64, Vec<LabeledBox>> = originals
        .scenes
        .iter()
        .map(|s| (s.id, s.labels.clone()))
        .collect();
    let num_original = originals.num_labels();
    let mine = PredictConfig {
        lambda_infer: cfg.weights.lambda_cls,
        nms_iou: st.nms_iou,
        max_out: st.proposals_per_scene,
    };

    let mut rounds = Vec::with_capacity(st.rounds + 1);
    let mut total_epochs = 0;
    for round in 0..=st.rounds {
        let started = Instant::now();
        let (label_set, pseudo, epochs, lr) = if round == 0 {
            (originals.clone(), BTreeMap::new(), st.initial_epochs, cfg.learning_rate)
        } else {
            // fresh pseudo-labels from the current model every round
            let preds = predict_dataset(model, &originals, features, grid, &mine)?;
            let pseudo = filter_and_merge(&preds, &gt_map, st, round);
            let mut labels = originals.clone();
            for s in &mut labels.scenes {
                if let Some(ps) = pseudo.get(&s.id) {
                    s.labels.extend(ps.iter().map(PseudoLabel::labeled));
                }
            }
            (
                labels,
                pseudo,
                st.finetune_epochs,
                cfg.learning_rate * st.finetune_lr_scale,
            )
        };

        let data = TrainingSet::new(&label_set, grid, features, &cfg.policy)?;
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let s = train_epoch(model, &data, cfg, lr, round as u64, epoch).map_err(|e| {
                Error::Diverged {
                    round,
                    epoch,
                    source: Box::new(e),
                }
            })?;
            log::debug!(
                "round {round} epoch {epoch}: loss {:.5} (cls {:.4}, lq {:.4}, box {:.4})",
                s.total,
                s.cls_term,
                s.lq_term,
                s.box_term
            );
            losses.push(s);
            total_epochs += 1;
        }

        let report = match eval {
            Some(t) => {
                let preds = predict_dataset(model, t.dataset, features, grid, &t.predict)?;
                Some(evaluate(
                    &preds,
                    t.dataset,
                    t.split,
                    &t.config,
                    serde_json::json!({
                        "round": round,
                        "lambda_cls": cfg.weights.lambda_cls,
                        "lambda_infer": t.predict.lambda_infer,
                    }),
                )?)
            }
            None => None,
        };
        let num_pseudo = pseudo.values().map(Vec::len).sum();
        log::info!(
            "round {round}: {epochs} epochs, {num_pseudo} pseudo-labels, final loss {:.5}",
            losses.last().map_or(f64::NAN, |s| s.total)
        );
        rounds.push(RoundRecord {
            round,
            epochs,
            learning_rate: lr,
            num_pseudo,
            num_original,
            losses,
            seconds: started.elapsed().as_secs_f64(),
            label_set,
            pseudo_labels: pseudo,
            eval: report,
        });
    }
    Ok(SelfTrainOutcome {
        rounds,
        total_epochs,
    })
}
