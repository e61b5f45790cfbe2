//! `alamo phantom gen` — synthetic dataset generation.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Subcommand};

use alamo::phantom::{generate, random_spec, split_dataset};
use alamo::{mvol, Error, Result};

use crate::cmd::RunContext;
use crate::dataset::{self, Splits};
use crate::manifest::{self, RunManifest};

#[derive(Subcommand)]
pub enum PhantomCmd {
    /// Write `count` paired volumes/labels plus a train/val/test split
    Gen(GenArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Number of cases to generate
    #[arg(long)]
    pub count: usize,
    /// Volume extents as z,y,x voxels (default 24,64,64)
    #[arg(long, default_value = "24,64,64", value_parser = parse_dims)]
    pub size: [usize; 3],
    /// Organs per case, classes 1..=organs (default 4)
    #[arg(long, default_value_t = 4)]
    pub organs: usize,
    /// Master seed; case i derives its own stream (default 0)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian intensity noise sigma (default 1.0)
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Low-frequency bias field amplitude (default 2.0)
    #[arg(long, default_value_t = 2.0)]
    pub bias: f64,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated extents, e.g. 24,64,64".into());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("bad extent '{p}': {e}"))?;
    }
    Ok(out)
}

pub fn run(cmd: PhantomCmd) -> Result<i32> {
    let PhantomCmd::Gen(args) = cmd;
    let ctx = RunContext::new();
    if args.count < 3 {
        return Err(Error::config("--count must be at least 3 (train/val/test split)"));
    }
    if args.organs == 0 || args.organs > 10 {
        return Err(Error::config("--organs must be in 1..=10"));
    }
    fs::create_dir_all(&args.out)?;

    let mut outputs = Vec::new();
    let mut specs = Vec::new();
    for i in 0..args.count {
        let spec = random_spec(args.size, args.organs, args.seed, i as u64, args.noise, args.bias)?;
        let (vol, lab) = generate(&spec)?;
        let img = dataset::img_path(&args.out, i);
        let lab_file = dataset::lab_path(&args.out, i);
        mvol::save_volume(&vol, &img)?;
        mvol::save_labels(&lab, &lab_file)?;
        outputs.push(manifest::entry(&img));
        outputs.push(manifest::entry(&lab_file));
        specs.push(spec);
    }

    let (train, val, test) = split_dataset(args.count, args.seed)?;
    let splits = Splits { train, val, test };
    let splits_path = args.out.join("splits.json");
    fs::write(&splits_path, serde_json::to_string_pretty(&splits).unwrap())?;
    outputs.push(manifest::entry(&splits_path));

    let specs_path = args.out.join("specs.json");
    fs::write(&specs_path, serde_json::to_string_pretty(&specs).unwrap())?;
    outputs.push(manifest::entry(&specs_path));

    let config = serde_json::json!({
        "count": args.count,
        "size": args.size,
        "organs": args.organs,
        "seed": args.seed,
        "noise": args.noise,
        "bias": args.bias,
        "out": args.out.display().to_string(),
    });
    let m = RunManifest {
        command: "phantom gen".into(),
        argv: ctx.argv.clone(),
        config,
        seed: Some(args.seed),
        inputs: vec![],
        outputs,
        duration_seconds: ctx.elapsed(),
        timings: None,
    };
    manifest::write(&m, &args.out.join("manifest.json"))?;
    println!(
        "wrote {} cases to {} (split {}/{}/{})",
        args.count,
        args.out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(0)
}
