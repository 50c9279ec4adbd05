use std::path::{Path, PathBuf};
use std::time::Instant;

use thpn::dataset::{apply_split, save_annotations};
use thpn::evaluation::EvalConfig;
use thpn::self_training::{run_self_training, EvalTarget, SelfTrainConfig, SelfTrainOutcome};
use thpn::toy_model::{Checkpoint, PredictConfig, ToyModel, TrainConfig};

use crate::args::{SelftrainArgs, TrainArgs};
use crate::data::DataDir;
use crate::error::{CliError, Context};
use crate::manifest::{ComponentSeeds, RoundSummary, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.json";

pub fn label_file(round: usize) -> String {
    format!("labels_round_{round}.json")
}

pub fn eval_file(round: usize) -> String {
    format!("eval_round_{round}.json")
}

/// Training and self-training configs from flags over library defaults.
pub fn resolve_train(
    args: &TrainArgs,
    lambda_cls: f64,
    p_percent: Option<f64>,
) -> Result<(TrainConfig, SelfTrainConfig), CliError> {
    let mut cfg = TrainConfig::default();
    cfg.weights = cfg.weights.with_lambda_cls(lambda_cls);
    if let Some(v) = args.lambda_box {
        cfg.weights.lambda_box = v;
    }
    if let Some(q) = args.quality_loss {
        cfg.weights.quality_loss = q.into();
    }
    if let Some(q) = args.quality {
        cfg.policy.quality = q.into();
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let mut st = SelfTrainConfig::with_epochs(cfg.epochs);
    if let Some(r) = args.rounds {
        st.rounds = r;
    }
    if let Some(p) = p_percent {
        st.p_percent = p;
    }
    if let Some(v) = args.nms_iou {
        if !(v > 0.0 && v <= 1.0) {
            return Err(CliError::Config(format!("NMS IoU {v} outside (0, 1]")));
        }
        st.nms_iou = v;
    }
    cfg.validate().context("training config")?;
    st.validate().context("self-training config")?;
    Ok((cfg, st))
}

pub struct SelftrainOutput {
    pub checkpoint: Checkpoint,
    pub outcome: SelfTrainOutcome,
    pub manifest: RunManifest,
    pub out: PathBuf,
}

/// Split the training scenes, run all rounds and write the checkpoint, the
/// label set of every self-training round and the manifest into `out`.
pub fn selftrain(
    data: &DataDir,
    cfg: &TrainConfig,
    st: &SelfTrainConfig,
    seed: u64,
    eval_rounds: bool,
    out: &Path,
) -> Result<SelftrainOutput, CliError> {
    let started = Instant::now();
    let seeds = ComponentSeeds::derive(seed);
    let mut cfg = cfg.clone();
    cfg.seed = seeds.train;
    let split = apply_split(&data.train, &data.split).context("applying split")?;
    let mut model = ToyModel::new(data.features.dim, cfg.hidden, seeds.init).context("model")?;
    let target = if eval_rounds {
        Some(EvalTarget {
            dataset: data.val()?,
            split: &data.split,
            config: EvalConfig::default(),
            predict: PredictConfig {
                lambda_infer: cfg.weights.lambda_cls,
                nms_iou: st.nms_iou,
                ..PredictConfig::default()
            },
        })
    } else {
        None
    };
    let outcome = run_self_training(
        &split.train,
        &data.features,
        &data.grid,
        &mut model,
        &cfg,
        st,
        target.as_ref(),
    )
    .context("self-training")?;

    let mut m = RunManifest::new("selftrain").with_seed(seed);
    m.input("data", &data.dir);
    m.input("split", &data.split_path);
    for r in &outcome.rounds {
        if r.round > 0 {
            let p = out.join(label_file(r.round));
            save_annotations(&r.label_set, &p).context("writing label set")?;
            m.output(&format!("labels_round_{}", r.round), &p);
        }
        if let Some(report) = &r.eval {
            let p = out.join(eval_file(r.round));
            let text = report.to_json().context("serializing report")?;
            std::fs::write(&p, text).map_err(|e| CliError::runtime(p.display(), e))?;
            m.output(&format!("eval_round_{}", r.round), &p);
        }
    }
    let checkpoint = Checkpoint::new(
        model,
        cfg.weights.lambda_cls,
        serde_json::json!({
            "seed": seed,
            "rounds": st.rounds,
            "total_epochs": outcome.total_epochs,
        }),
    );
    let ckpt_path = out.join(CHECKPOINT_FILE);
    checkpoint.save(&ckpt_path).context("writing checkpoint")?;
    m.output("checkpoint", &ckpt_path);
    m.config = serde_json::json!({
        "train": cfg,
        "self_training": st,
        "eval_rounds": eval_rounds,
        "withheld_labels": split.withheld.len(),
        "dropped_scenes": split.dropped.len(),
    });
    m.total_epochs = Some(outcome.total_epochs);
    m.rounds = outcome.rounds.iter().map(RoundSummary::from).collect();
    m.seconds = started.elapsed().as_secs_f64();
    m.save(out)?;
    Ok(SelftrainOutput {
        checkpoint,
        outcome,
        manifest: m,
        out: out.to_path_buf(),
    })
}

pub fn cmd_selftrain(args: &SelftrainArgs, out: &Path) -> Result<SelftrainOutput, CliError> {
    let (cfg, st) = resolve_train(&args.train, args.lambda_cls, args.p_percent)?;
    let data = DataDir::load(&args.data)?;
    let result = selftrain(&data, &cfg, &st, args.seed, args.eval_rounds, out)?;
    log::info!(
        "trained {} epochs over {} rounds; checkpoint in {}",
        result.outcome.total_epochs,
        result.outcome.rounds.len(),
        out.display()
    );
    Ok(result)
}
