//! `alamo train` — training with loss trace and checkpoints.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use alamo::nn::{Checkpoint, ModelConfig};
use alamo::train::{
    train_loop, AugmentConfig, Dataset, TrainConfig, TrainSinks, TrainState, TRACE_HEADER,
};
use alamo::{Error, Result};

use crate::cmd::RunContext;
use crate::dataset;
use crate::manifest::{self, RunManifest};

/// On-disk training configuration: model + schedule + augmentation.
/// Every field is optional; defaults are materialized into the
/// manifest.
#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config JSON ({"model":..,"train":..,"augment":..});
    /// omitted sections use the defaults echoed in the manifest
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory from `phantom gen` (uses its train/val split)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, loss.csv and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a checkpoint (continues its step counter and RNG)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override train.max_steps
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Override train.seed (config default: 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override train.lr0 (config default: 1e-4)
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override train.checkpoint_every (config default: 500)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Override train.target_spacing in mm (config default: native grid)
    #[arg(long)]
    pub spacing: Option<f64>,
}

pub fn run(args: TrainArgs) -> Result<i32> {
    let ctx = RunContext::new();
    let mut cfg: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|_| Error::config(format!("cannot read config {}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("malformed config json: {e}")))?
        }
        None => FileConfig::default(),
    };
    if let Some(v) = args.max_steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr0 = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(v) = args.spacing {
        cfg.train.target_spacing = Some(v);
    }

    // Every validation failure at once, before any work starts.
    let mut problems = Vec::new();
    if let Err(e) = cfg.model.validate() {
        problems.push(e.to_string());
    }
    problems.extend(cfg.train.problems());
    problems.extend(cfg.augment.problems(&cfg.model));
    if !args.data.is_dir() {
        problems.push(format!("data directory {} does not exist", args.data.display()));
    }
    if !problems.is_empty() {
        return Err(Error::config(problems.join("\n  ")));
    }

    let splits = dataset::load_splits(&args.data)?;
    let mut data = Dataset::default();
    for &i in &splits.train {
        data.train.push(dataset::load_pair(&args.data, i)?);
    }
    for &i in &splits.val {
        data.val.push(dataset::load_pair(&args.data, i)?);
    }

    fs::create_dir_all(&args.out)?;
    let state = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg.model {
                return Err(Error::config(
                    "checkpoint model config differs from the requested config; \
                     drop --config model overrides or use the matching checkpoint",
                ));
            }
            TrainState::from_checkpoint(&ckpt)?
        }
        None => TrainState::fresh(&cfg.model, &cfg.train)?,
    };

    let trace_path = args.out.join("loss.csv");
    let mut trace_file = fs::File::create(&trace_path)?;
    writeln!(trace_file, "{TRACE_HEADER}")?;

    let out_dir = args.out.clone();
    let every = cfg.train.checkpoint_every;
    let mut ckpt_paths: Vec<PathBuf> = Vec::new();
    let mut on_trace = |row: &alamo::train::TraceRow| {
        writeln!(trace_file, "{}", row.csv()).expect("loss trace write failed");
    };
    let mut on_ckpt = |step: u64, ckpt: &Checkpoint| -> Result<()> {
        // Step-numbered files only at the periodic boundaries; the
        // final state is written separately as ckpt_final.ckpt.
        if every > 0 && step > 0 && step % every == 0 {
            let path = out_dir.join(format!("ckpt_step{step:07}.ckpt"));
            ckpt.save(&path)?;
            ckpt_paths.push(path);
        }
        Ok(())
    };
    let mut sinks = TrainSinks { on_trace: Some(&mut on_trace), on_checkpoint: Some(&mut on_ckpt) };
    let (final_state, trace) = train_loop(state, &data, &cfg.train, &cfg.augment, &mut sinks)?;
    drop(sinks);

    let final_path = args.out.join("ckpt_final.ckpt");
    final_state.to_checkpoint().save(&final_path)?;

    let mut outputs: Vec<_> = ckpt_paths.iter().map(|p| manifest::entry(p)).collect();
    outputs.push(manifest::entry(&final_path));
    outputs.push(manifest::entry(&trace_path));
    let m = RunManifest {
        command: "train".into(),
        argv: ctx.argv.clone(),
        config: serde_json::to_value(&cfg).unwrap(),
        seed: Some(cfg.train.seed),
        inputs: vec![manifest::dir_entry(&args.data)],
        outputs,
        duration_seconds: ctx.elapsed(),
        timings: None,
    };
    manifest::write(&m, &args.out.join("manifest.json"))?;
    match trace.last() {
        Some(row) => println!(
            "trained to step {} (final loss {:.6}); checkpoint {}",
            final_state.step,
            row.train_loss,
            final_path.display()
        ),
        None => println!(
            "no steps run (max_steps {}); initialization checkpoint {}",
            cfg.train.max_steps,
            final_path.display()
        ),
    }
    Ok(0)
}
