use std::fmt::Write;
use std::path::Path;

use thpn::evaluation::{EvalReport, Subset, AR_KS};

use crate::args::ReportArgs;
use crate::error::{CliError, Context};

pub fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime(path.display(), e))?;
    EvalReport::from_json(&text).context(path.display())
}

/// Fixed-width table: one line per subset, AR at each budget, then AUC.
pub fn render(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<6}", "subset");
    for k in AR_KS {
        let _ = write!(s, " {:>7}", format!("AR@{k}"));
    }
    let _ = writeln!(s, " {:>7} {:>6}", "AUC", "#GT");
    for subset in Subset::ALL_SUBSETS {
        let Some(r) = report.get(subset) else {
            let _ = writeln!(s, "{:<6} (no ground truth)", subset.name());
            continue;
        };
        let _ = write!(s, "{:<6}", subset.name());
        for k in AR_KS {
            match r.ar.get(&k) {
                Some(v) => {
                    let _ = write!(s, " {v:>7.4}");
                }
                None => {
                    let _ = write!(s, " {:>7}", "-");
                }
            }
        }
        let auc = r.auc.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, " {auc:>7} {:>6}", r.num_gt);
    }
    s
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    for path in &args.inputs {
        let report = load_report(path)?;
        println!("{}", path.display());
        print!("{}", render(&report));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use thpn::evaluation::SubsetReport;

    #[test]
    fn render_marks_missing_subsets() {
        let ar: BTreeMap<usize, f64> = AR_KS.iter().map(|&k| (k, 0.5)).collect();
        let mut subsets = BTreeMap::new();
        subsets.insert(
            Subset::Id,
            SubsetReport {
                ar,
                auc: Some(0.5),
                num_gt: 4,
                num_scenes: 2,
            },
        );
        let r = EvalReport {
            subsets,
            config: serde_json::json!({}),
        };
        let text = render(&r);
        assert!(text.contains("ID     "));
        assert!(text.contains("0.5000"));
        assert!(text.contains("OOD    (no ground truth)"));
        assert_eq!(text.lines().count(), 4);
    }
}
