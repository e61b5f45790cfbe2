//! `alamo verify` — run the oracle suites and report per check.

use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use alamo::verify::{fusion_suite, gradcheck_suite, metrics_suite, Check};
use alamo::Result;

use crate::cmd::RunContext;
use crate::manifest::{self, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Finite-difference gradient checks for every layer and the
    /// assembled tiny network
    Gradcheck,
    /// Brute-force oracle equivalence for the distance/overlap metrics
    Metrics,
    /// Majority-vote fusion properties
    Fusion,
    /// Everything
    All,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Which suite to run
    #[arg(value_enum)]
    pub suite: Suite,
    /// Seed for the randomized checks (default 0)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write verify_report.json and manifest.json (default .)
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn run(args: VerifyArgs) -> Result<i32> {
    let ctx = RunContext::new();
    let mut checks: Vec<Check> = Vec::new();
    if matches!(args.suite, Suite::Gradcheck | Suite::All) {
        checks.extend(gradcheck_suite(args.seed));
    }
    if matches!(args.suite, Suite::Metrics | Suite::All) {
        checks.extend(metrics_suite(args.seed));
    }
    if matches!(args.suite, Suite::Fusion | Suite::All) {
        checks.extend(fusion_suite(args.seed));
    }

    let mut failures = 0usize;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {} — {}", c.name, c.detail);
        if !c.passed {
            failures += 1;
        }
    }
    println!("{} checks, {} failures", checks.len(), failures);

    fs::create_dir_all(&args.out)?;
    let report: Vec<serde_json::Value> = checks
        .iter()
        .map(|c| {
            serde_json::json!({ "name": c.name, "passed": c.passed, "detail": c.detail })
        })
        .collect();
    let report_path = args.out.join("verify_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())?;

    let m = RunManifest {
        command: "verify".into(),
        argv: ctx.argv.clone(),
        config: serde_json::json!({ "suite": format!("{:?}", args.suite), "seed": args.seed }),
        seed: Some(args.seed),
        inputs: vec![],
        outputs: vec![manifest::entry(&report_path)],
        duration_seconds: ctx.elapsed(),
        timings: None,
    };
    manifest::write(&m, &args.out.join("verify_manifest.json"))?;

    Ok(if failures == 0 { 0 } else { 1 })
}
