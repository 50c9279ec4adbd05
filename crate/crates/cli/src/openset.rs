// Multi-seed comparison on synthetic open-set data. Per seed, on one
// dataset and one initialization:
//   * a quality-only model (blend weight 0) trained with self-training rounds,
//     evaluated after the initial training and after the last round;
//   * a classification-only model (blend weight 1) without self-training.
// Recall is AR@100 on the validation scenes, blended at the training weight.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thpn::dataset::{apply_split, synthesize, SynthConfig};
use thpn::evaluation::{EvalConfig, EvalReport, Subset};
use thpn::self_training::{run_self_training, EvalTarget, SelfTrainConfig};
use thpn::toy_model::{PredictConfig, ToyModel, TrainConfig};

use crate::args::OpensetArgs;
use crate::error::{CliError, Context};
use crate::manifest::{ComponentSeeds, RunManifest};
use crate::selftrain::resolve_train;
use crate::synth::load_synth_config;

pub const K: usize = 100;
pub const RESULT_FILE: &str = "openset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetConfig {
    pub synth: SynthConfig,
    /// Blend weight is overridden per arm.
    pub train: TrainConfig,
    /// Rounds apply to the quality-only arm only.
    pub self_training: SelfTrainConfig,
}

impl Default for OpenSetConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        OpenSetConfig {
            synth: SynthConfig::default(),
            self_training: SelfTrainConfig::with_epochs(train.epochs),
            train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Blend weight 0, before self-training.
    pub id_lq: f64,
    pub ood_lq: f64,
    /// Blend weight 0, after the last self-training round.
    pub id_lq_self_trained: f64,
    pub ood_lq_self_trained: f64,
    /// Blend weight 1.
    pub id_cls: f64,
    pub ood_cls: f64,
    pub num_pseudo: Vec<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    pub id_lq: f64,
    pub ood_lq: f64,
    pub id_lq_self_trained: f64,
    pub ood_lq_self_trained: f64,
    pub id_cls: f64,
    pub ood_cls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSummary {
    pub k: usize,
    pub config: OpenSetConfig,
    pub seeds: Vec<SeedResult>,
    pub median: Medians,
    /// Median OOD recall of the quality-only model beats the classifier.
    pub ood_lq_beats_cls: bool,
    /// Median ID recall of the classifier beats the quality-only model.
    pub id_cls_beats_lq: bool,
    /// Median OOD recall improves with self-training.
    pub self_training_helps_ood: bool,
    pub seconds: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn recall(report: Option<&EvalReport>, subset: Subset) -> Result<f64, CliError> {
    report
        .and_then(|r| r.ar(subset, K))
        .ok_or_else(|| CliError::Runtime(format!("no {subset} AR@{K} in the validation report")))
}

pub fn run_seed(cfg: &OpenSetConfig, seed: u64) -> Result<SeedResult, CliError> {
    let started = Instant::now();
    let seeds = ComponentSeeds::derive(seed);
    let data = synthesize(&cfg.synth, seeds.data).context("synthesizing scenes")?;
    let train = apply_split(&data.train, &data.split).context("applying split")?.train;
    let grid = data.features.grid.grid().context("feature grid")?;

    let arm = |lambda: f64, rounds: usize| {
        let mut tc = cfg.train.clone();
        tc.weights = tc.weights.with_lambda_cls(lambda);
        tc.seed = seeds.train;
        let st = SelfTrainConfig {
            rounds,
            ..cfg.self_training.clone()
        };
        let target = EvalTarget {
            dataset: &data.val,
            split: &data.split,
            config: EvalConfig::default(),
            predict: PredictConfig {
                lambda_infer: lambda,
                nms_iou: st.nms_iou,
                ..PredictConfig::default()
            },
        };
        let mut model = ToyModel::new(data.features.dim, tc.hidden, seeds.init).context("model")?;
        run_self_training(&train, &data.features, &grid, &mut model, &tc, &st, Some(&target))
            .context(format!("seed {seed}, blend weight {lambda}"))
    };

    let lq = arm(0.0, cfg.self_training.rounds)?;
    let cls = arm(1.0, 0)?;
    let first = lq.rounds.first().and_then(|r| r.eval.as_ref());
    let last = lq.rounds.last().and_then(|r| r.eval.as_ref());
    let c = cls.rounds.last().and_then(|r| r.eval.as_ref());
    Ok(SeedResult {
        seed,
        id_lq: recall(first, Subset::Id)?,
        ood_lq: recall(first, Subset::Ood)?,
        id_lq_self_trained: recall(last, Subset::Id)?,
        ood_lq_self_trained: recall(last, Subset::Ood)?,
        id_cls: recall(c, Subset::Id)?,
        ood_cls: recall(c, Subset::Ood)?,
        num_pseudo: lq.rounds.iter().skip(1).map(|r| r.num_pseudo).collect(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_open_set(cfg: &OpenSetConfig, seeds: &[u64]) -> Result<OpenSetSummary, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    let started = Instant::now();
    let mut results = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let r = run_seed(cfg, s)?;
        log::info!(
            "seed {s}: OOD {:.3} / {:.3} (self-trained) / {:.3} (cls), ID {:.3} / {:.3} (cls)",
            r.ood_lq,
            r.ood_lq_self_trained,
            r.ood_cls,
            r.id_lq,
            r.id_cls
        );
        results.push(r);
    }
    let col = |f: fn(&SeedResult) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());
    let median = Medians {
        id_lq: col(|r| r.id_lq),
        ood_lq: col(|r| r.ood_lq),
        id_lq_self_trained: col(|r| r.id_lq_self_trained),
        ood_lq_self_trained: col(|r| r.ood_lq_self_trained),
        id_cls: col(|r| r.id_cls),
        ood_cls: col(|r| r.ood_cls),
    };
    Ok(OpenSetSummary {
        k: K,
        config: cfg.clone(),
        ood_lq_beats_cls: median.ood_lq > median.ood_cls,
        id_cls_beats_lq: median.id_cls > median.id_lq,
        self_training_helps_ood: median.ood_lq_self_trained > median.ood_lq,
        median,
        seeds: results,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn cmd_openset(args: &OpensetArgs, out: &Path) -> Result<OpenSetSummary, CliError> {
    let synth = load_synth_config(args.config.as_deref())?;
    let (train, self_training) = resolve_train(&args.train, 0.0, args.p_percent)?;
    let cfg = OpenSetConfig {
        synth,
        train,
        self_training,
    };
    let summary = run_open_set(&cfg, &args.seed)?;

    let path = out.join(RESULT_FILE);
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::runtime("serializing summary", e))?;
    std::fs::write(&path, text).map_err(|e| CliError::runtime(path.display(), e))?;
    let mut m = RunManifest::new("openset");
    if let Some(p) = &args.config {
        m.input("config", p);
    }
    m.output("summary", &path);
    m.config = serde_json::to_value(&cfg).map_err(|e| CliError::runtime("config", e))?;
    m.seconds = summary.seconds;
    m.save(out)?;

    let md = &summary.median;
    println!("median AR@{K} over {} seeds", summary.seeds.len());
    println!("  OOD: blend 0 {:.4}, blend 1 {:.4}", md.ood_lq, md.ood_cls);
    println!("  ID:  blend 0 {:.4}, blend 1 {:.4}", md.id_lq, md.id_cls);
    println!(
        "  OOD at blend 0 after {} rounds: {:.4}",
        cfg.self_training.rounds, md.ood_lq_self_trained
    );
    Ok(summary)
}
