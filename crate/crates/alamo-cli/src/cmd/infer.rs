//! `alamo infer` — checkpointed multi-view inference.

use std::path::PathBuf;

use clap::Args;

use alamo::infer::{fuse_majority, fuse_soft, predict_views, FuseMode};
use alamo::nn::Checkpoint;
use alamo::volume::{resample_isotropic, resample_labels_to, standardize, ViewAxis};
use alamo::{mvol, Error, Result};

use crate::cmd::RunContext;
use crate::manifest::{self, RunManifest};

#[derive(Args)]
pub struct InferArgs {
    /// Trained checkpoint (.ckpt)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input intensity volume (.mvol)
    #[arg(long)]
    pub input: PathBuf,
    /// Output label map (.mvol); the manifest lands next to it
    #[arg(long)]
    pub out: PathBuf,
    /// Views to run: comma-separated subset of t,c,s (default t,c,s)
    #[arg(long, default_value = "t,c,s")]
    pub views: String,
    /// Fusion: vote | soft | single:<view> (default vote)
    #[arg(long, default_value = "vote")]
    pub fuse: String,
    /// Isotropic working resolution in mm (default 1.2)
    #[arg(long, default_value_t = 1.2)]
    pub spacing: f64,
    /// Slab stride along the slice axis; 0 = slab size (default 0)
    #[arg(long, default_value_t = 0)]
    pub stride: usize,
    /// Also write per-view, per-class probability volumes
    #[arg(long, default_value_t = false)]
    pub save_probmaps: bool,
}

fn parse_views(s: &str) -> Result<Vec<ViewAxis>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let v = ViewAxis::parse_short(part.trim())?;
        if out.contains(&v) {
            return Err(Error::config(format!("view '{part}' listed twice")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::config("--views must list at least one view"));
    }
    Ok(out)
}

fn parse_fuse(s: &str, views: &[ViewAxis]) -> Result<FuseMode> {
    match s {
        "vote" | "soft" => {
            if views.len() != 3 {
                return Err(Error::config(format!(
                    "--fuse {s} needs all three views, got --views with {}",
                    views.len()
                )));
            }
            Ok(if s == "vote" { FuseMode::Vote } else { FuseMode::Soft })
        }
        other => match other.strip_prefix("single:") {
            Some(v) => {
                let view = ViewAxis::parse_short(v)?;
                if !views.contains(&view) {
                    return Err(Error::config(format!(
                        "--fuse single:{v} requires '{v}' in --views"
                    )));
                }
                Ok(FuseMode::Single(view))
            }
            None => Err(Error::config(format!(
                "unknown fusion '{other}' (expected vote, soft or single:<view>)"
            ))),
        },
    }
}

pub fn run(args: InferArgs) -> Result<i32> {
    let ctx = RunContext::new();
    let views = parse_views(&args.views)?;
    let fuse = parse_fuse(&args.fuse, &views)?;
    if !(args.spacing > 0.0) {
        return Err(Error::config("--spacing must be > 0"));
    }

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (net, norm) = ckpt.unpack_network()?;
    let input = mvol::load_volume(&args.input)?;

    // Standardize and resample once, then fan the views out.
    let std = standardize(&input)?;
    let iso = resample_isotropic(&std, args.spacing)?;
    let run_views: Vec<ViewAxis> = match fuse {
        FuseMode::Single(view) => vec![view],
        _ => views.clone(),
    };
    let maps = predict_views(&net, &norm, &iso, &run_views, args.stride)?;
    let fused = match fuse {
        FuseMode::Single(_) => maps[0].1.argmax_labels()?,
        FuseMode::Vote => fuse_majority(&maps[0].1, &maps[1].1, &maps[2].1)?,
        FuseMode::Soft => fuse_soft(&maps[0].1, &maps[1].1, &maps[2].1)?,
    };
    let labels = resample_labels_to(&fused, input.dims, input.spacing)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    mvol::save_labels(&labels, &args.out)?;

    let mut outputs = vec![manifest::entry(&args.out)];
    if args.save_probmaps {
        for (view, map, _) in &maps {
            let n = map.voxels();
            for class in 0..map.class_count {
                let vol = alamo::volume::Volume::new(
                    map.dims,
                    map.spacing,
                    map.data[class * n..(class + 1) * n].to_vec(),
                )?;
                let path = args.out.with_extension(format!("{}.c{class:02}.mvol", view.short()));
                mvol::save_volume(&vol, &path)?;
                outputs.push(manifest::entry(&path));
            }
        }
    }

    let timings: Vec<serde_json::Value> = maps
        .iter()
        .map(|(view, _, seconds)| {
            serde_json::json!({ "view": view.short(), "seconds": seconds })
        })
        .collect();
    let m = RunManifest {
        command: "infer".into(),
        argv: ctx.argv.clone(),
        config: serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "input": args.input.display().to_string(),
            "views": run_views.iter().map(|v| v.short()).collect::<Vec<_>>(),
            "fuse": args.fuse,
            "spacing": args.spacing,
            "stride": args.stride,
            "save_probmaps": args.save_probmaps,
            "model": serde_json::to_value(&ckpt.config).unwrap(),
        }),
        seed: None,
        inputs: vec![manifest::entry(&args.checkpoint), manifest::entry(&args.input)],
        outputs,
        duration_seconds: ctx.elapsed(),
        timings: Some(serde_json::Value::Array(timings)),
    };
    let manifest_path = args.out.with_extension("manifest.json");
    manifest::write(&m, &manifest_path)?;
    println!("wrote {} ({} views, fuse {})", args.out.display(), maps.len(), args.fuse);
    Ok(0)
}
