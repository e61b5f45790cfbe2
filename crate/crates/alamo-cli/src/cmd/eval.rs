//! `alamo eval` — metric reports and optional paired significance
//! tests between two methods' predictions.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use alamo::metrics::{compare_methods, evaluate, per_case_csv, significance_csv, summary_csv, CaseRow};
use alamo::{mvol, Error, Result};

use crate::cmd::RunContext;
use crate::dataset::label_files;
use crate::manifest::{self, RunManifest};

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predictions (*_pred.mvol, or *_lab.mvol)
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth labels (*_lab.mvol)
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for the CSV reports and manifest
    #[arg(long)]
    pub out: PathBuf,
    /// Second prediction directory: adds per-class paired significance
    /// tests (pred vs compare)
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

fn method_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Evaluate every prediction in `pred_dir` against its ground-truth
/// case, in parallel over cases.
fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<CaseRow>> {
    let preds = label_files(pred_dir)?;
    let gts = label_files(gt_dir)?;
    let mut unpaired: Vec<&String> = preds.keys().filter(|id| !gts.contains_key(*id)).collect();
    if !unpaired.is_empty() {
        unpaired.sort();
        return Err(Error::invalid(format!(
            "unpaired case ids (no ground truth): {}",
            unpaired.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let entries: Vec<(&String, &PathBuf)> = preds.iter().collect();
    let mut rows: Vec<CaseRow> = entries
        .par_iter()
        .map(|(id, pred_path)| {
            let pred = mvol::load_labels(pred_path)?;
            let gt = mvol::load_labels(&gts[*id])?;
            let metrics = evaluate(&pred, &gt, gt.spacing)?;
            Ok(CaseRow { case_id: (*id).clone(), metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(rows)
}

pub fn run(args: EvalArgs) -> Result<i32> {
    let ctx = RunContext::new();
    fs::create_dir_all(&args.out)?;
    let rows = evaluate_dir(&args.pred, &args.gt)?;

    let per_case_path = args.out.join("per_case.csv");
    fs::write(&per_case_path, per_case_csv(&rows)?)?;
    let summary_path = args.out.join("summary.csv");
    fs::write(&summary_path, summary_csv(&rows)?)?;
    let mut outputs = vec![manifest::entry(&per_case_path), manifest::entry(&summary_path)];

    let mut significance_path = None;
    if let Some(compare_dir) = &args.compare {
        let other = evaluate_dir(compare_dir, &args.gt)?;
        let sig = compare_methods(&rows, &other, &method_name(&args.pred), &method_name(compare_dir))?;
        let path = args.out.join("significance.csv");
        fs::write(&path, significance_csv(&sig))?;
        outputs.push(manifest::entry(&path));
        significance_path = Some(path);
    }

    let m = RunManifest {
        command: "eval".into(),
        argv: ctx.argv.clone(),
        config: serde_json::json!({
            "pred": args.pred.display().to_string(),
            "gt": args.gt.display().to_string(),
            "compare": args.compare.as_ref().map(|p| p.display().to_string()),
            "cases": rows.len(),
        }),
        seed: None,
        inputs: vec![manifest::dir_entry(&args.pred), manifest::dir_entry(&args.gt)],
        outputs,
        duration_seconds: ctx.elapsed(),
        timings: None,
    };
    manifest::write(&m, &args.out.join("manifest.json"))?;
    println!(
        "evaluated {} cases -> {}{}",
        rows.len(),
        summary_path.display(),
        significance_path
            .map(|p| format!(", significance -> {}", p.display()))
            .unwrap_or_default()
    );
    Ok(0)
}
