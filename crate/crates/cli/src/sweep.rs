use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thpn::evaluation::{EvalReport, Subset, AR_KS};

use crate::args::{Partition, SweepArgs};
use crate::data::DataDir;
use crate::error::CliError;
use crate::eval::{evaluate_checkpoint, resolve_predict, write_eval};
use crate::manifest::{GridFailure, RunManifest};
use crate::selftrain::{resolve_train, selftrain};

pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lambda_cls: f64,
    pub p_percent: f64,
    pub seed: u64,
}

impl GridPoint {
    pub fn dir_name(&self) -> String {
        format!("lambda{}_p{}_seed{}", self.lambda_cls, self.p_percent, self.seed)
    }
}

/// Row-major grid: blend weight, then budget, then seed.
pub fn grid(lambdas: &[f64], ps: &[f64], seeds: &[u64]) -> Vec<GridPoint> {
    let mut out = Vec::with_capacity(lambdas.len() * ps.len() * seeds.len());
    for &lambda_cls in lambdas {
        for &p_percent in ps {
            for &seed in seeds {
                out.push(GridPoint {
                    lambda_cls,
                    p_percent,
                    seed,
                });
            }
        }
    }
    out
}

/// Run `f` on every point; failures are collected and the grid continues.
pub fn run_grid<T>(
    points: &[GridPoint],
    mut f: impl FnMut(&GridPoint) -> Result<T, CliError>,
) -> (Vec<(GridPoint, T)>, Vec<GridFailure>) {
    let mut done = Vec::new();
    let mut failed = Vec::new();
    for p in points {
        match f(p) {
            Ok(v) => done.push((*p, v)),
            Err(e) => {
                log::warn!("grid point {} failed: {e}", p.dir_name());
                failed.push(GridFailure {
                    lambda_cls: p.lambda_cls,
                    p_percent: p.p_percent,
                    seed: p.seed,
                    error: e.to_string(),
                });
            }
        }
    }
    (done, failed)
}

/// One line of the merged sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub p: f64,
    pub subset: String,
    pub k: usize,
    #[serde(rename = "AR")]
    pub ar: Option<f64>,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    pub seed: u64,
}

/// Rows for every subset and budget; subsets without ground truth get
/// empty AR and AUC cells so every grid point has the same row count.
pub fn sweep_rows(point: &GridPoint, report: &EvalReport) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for subset in Subset::ALL_SUBSETS {
        let auc = report.get(subset).and_then(|r| r.auc);
        for k in AR_KS {
            rows.push(SweepRow {
                lambda: point.lambda_cls,
                p: point.p_percent,
                subset: subset.name().to_string(),
                k,
                ar: report.ar(subset, k),
                auc,
                seed: point.seed,
            });
        }
    }
    rows
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(path.display(), e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::runtime(path.display(), e))?;
    }
    w.flush().map_err(|e| CliError::runtime(path.display(), e))
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::runtime(path.display(), e))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::runtime(path.display(), e))
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub manifest: RunManifest,
}

/// Self-train and evaluate on the validation scenes at every grid point.
/// Each point owns `out/<point>/`; the merged table goes to `out/sweep.csv`.
/// Failed points are listed in the manifest and make the command fail after
/// the remaining points have run.
pub fn cmd_sweep(args: &SweepArgs, out: &Path) -> Result<SweepOutcome, CliError> {
    let started = Instant::now();
    if args.lambda_cls.is_empty() || args.p_percent.is_empty() || args.seed.is_empty() {
        return Err(CliError::Config("sweep grids must be nonempty".into()));
    }
    let points = grid(&args.lambda_cls, &args.p_percent, &args.seed);
    // fail on bad settings before any training
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        configs.push(resolve_train(&args.train, p.lambda_cls, Some(p.p_percent))?);
    }
    let data = DataDir::load(&args.data)?;
    data.val()?;

    let mut next = configs.iter();
    let (done, failures) = run_grid(&points, |p| {
        let (cfg, st) = next.next().expect("one config per point");
        let dir = out.join(p.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(dir.display(), e))?;
        let trained = selftrain(&data, cfg, st, p.seed, false, &dir)?;
        let pc = resolve_predict(&trained.checkpoint, None, Some(st.nms_iou), None)?;
        let (report, preds) = evaluate_checkpoint(&trained.checkpoint, &data, Partition::Val, &pc)?;
        let mut m = trained.manifest.clone();
        write_eval(&report, &preds, &mut m, &dir)?;
        m.save(&dir)?;
        Ok(report)
    });

    let rows: Vec<SweepRow> = done.iter().flat_map(|(p, r)| sweep_rows(p, r)).collect();
    let csv_path = out.join(SWEEP_CSV);
    write_rows(&csv_path, &rows)?;

    let mut m = RunManifest::new("sweep");
    m.input("data", &data.dir);
    m.input("split", &data.split_path);
    m.output("table", &csv_path);
    for (p, _) in &done {
        m.output(&p.dir_name(), &out.join(p.dir_name()));
    }
    m.config = serde_json::json!({
        "lambda_cls": args.lambda_cls,
        "p_percent": args.p_percent,
        "seeds": args.seed,
        "train": configs.first().map(|c| &c.0),
        "self_training": configs.first().map(|c| &c.1),
    });
    m.failures = failures;
    m.seconds = started.elapsed().as_secs_f64();
    m.save(out)?;
    if !m.failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} of {} grid points failed; see {}",
            m.failures.len(),
            points.len(),
            out.join(crate::manifest::MANIFEST_FILE).display()
        )));
    }
    Ok(SweepOutcome { rows, manifest: m })
}
