use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use thpn::dataset::write_predictions;
use thpn::evaluation::{evaluate, EvalConfig, EvalReport};
use thpn::scoring::ScoredProposal;
use thpn::toy_model::{predict_dataset, Checkpoint, PredictConfig};

use crate::args::{EvalArgs, Partition};
use crate::data::DataDir;
use crate::error::{CliError, Context};
use crate::manifest::RunManifest;

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";

/// Inference settings; the blend weight defaults to the training value.
pub fn resolve_predict(
    ckpt: &Checkpoint,
    lambda_infer: Option<f64>,
    nms_iou: Option<f64>,
    max_out: Option<usize>,
) -> Result<PredictConfig, CliError> {
    let d = PredictConfig::default();
    let pc = PredictConfig {
        lambda_infer: lambda_infer.unwrap_or(ckpt.lambda_cls),
        nms_iou: nms_iou.unwrap_or(d.nms_iou),
        max_out: max_out.unwrap_or(d.max_out),
    };
    if !(0.0..=1.0).contains(&pc.lambda_infer) {
        return Err(CliError::Config(format!(
            "inference blend weight {} outside [0, 1]",
            pc.lambda_infer
        )));
    }
    if !(pc.nms_iou > 0.0 && pc.nms_iou <= 1.0) {
        return Err(CliError::Config(format!("NMS IoU {} outside (0, 1]", pc.nms_iou)));
    }
    if pc.max_out == 0 {
        return Err(CliError::Config("max proposals per scene must be positive".into()));
    }
    Ok(pc)
}

pub type Predictions = BTreeMap<u64, Vec<ScoredProposal>>;

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    data: &DataDir,
    on: Partition,
    pc: &PredictConfig,
) -> Result<(EvalReport, Predictions), CliError> {
    let scenes = match on {
        Partition::Train => &data.train,
        Partition::Val => data.val()?,
    };
    if ckpt.model.input_dim != data.features.dim {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features per anchor, data has {}",
            ckpt.model.input_dim, data.features.dim
        )));
    }
    let preds = predict_dataset(&ckpt.model, scenes, &data.features, &data.grid, pc)
        .context("predicting")?;
    let report = evaluate(
        &preds,
        scenes,
        &data.split,
        &EvalConfig::default(),
        serde_json::json!({
            "lambda_cls": ckpt.lambda_cls,
            "lambda_infer": pc.lambda_infer,
            "nms_iou": pc.nms_iou,
            "max_out": pc.max_out,
            "split": data.split.name,
            "on": format!("{on:?}").to_lowercase(),
        }),
    )
    .context("evaluating")?;
    Ok((report, preds))
}

/// Write report, predictions and manifest of one evaluation into `out`.
pub fn write_eval(
    report: &EvalReport,
    preds: &Predictions,
    m: &mut RunManifest,
    out: &Path,
) -> Result<(), CliError> {
    let rp = out.join(REPORT_FILE);
    let text = report.to_json().context("serializing report")?;
    std::fs::write(&rp, text).map_err(|e| CliError::runtime(rp.display(), e))?;
    m.output("report", &rp);
    let pp = out.join(PREDICTIONS_FILE);
    let flat: Vec<(u64, Vec<ScoredProposal>)> =
        preds.iter().map(|(k, v)| (*k, v.clone())).collect();
    write_predictions(&pp, &flat).context("writing predictions")?;
    m.output("predictions", &pp);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<EvalReport, CliError> {
    let started = Instant::now();
    let ckpt = Checkpoint::load(&args.checkpoint).context("loading checkpoint")?;
    let pc = resolve_predict(&ckpt, args.lambda_infer, args.nms_iou, args.max_out)?;
    let data = DataDir::load(&args.data)?;
    let (report, preds) = evaluate_checkpoint(&ckpt, &data, args.on, &pc)?;

    let mut m = RunManifest::new("eval");
    m.input("checkpoint", &args.checkpoint);
    m.input("data", &data.dir);
    m.input("split", &data.split_path);
    m.config = serde_json::json!({
        "predict": pc,
        "eval": EvalConfig::default(),
        "on": format!("{:?}", args.on).to_lowercase(),
    });
    write_eval(&report, &preds, &mut m, out)?;
    m.seconds = started.elapsed().as_secs_f64();
    m.save(out)?;
    Ok(report)
}
