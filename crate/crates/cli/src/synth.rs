use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use satswin::data::{synth_generate, write_chip, DatasetManifest, Dtype, ManifestEntry, Split, SynthKind};
use satswin::rng::{derive_seed, stream};

use crate::run::RunDir;
use crate::UserError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Args, Serialize)]
pub struct SynthArgs {
    /// textured-fields, moving-cloud, two-class-blobs, or density-ramp.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Chip size as TxHxWxB.
    #[arg(long, default_value = "3x64x64x6", value_parser = parse_dims)]
    dims: [usize; 4],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// The last `val` chips go to the validation split.
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Storage type of the pixel payload: f32 or u8.
    #[arg(long, default_value = "f32", value_parser = parse_dtype)]
    dtype: Dtype,
    #[arg(long)]
    out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a size in `{s}`")))
        .collect::<Result<_, _>>()?;
    <[usize; 4]>::try_from(parts).map_err(|_| format!("expected TxHxWxB, got `{s}`"))
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "u8" => Ok(Dtype::U8),
        _ => Err(format!("unknown dtype `{s}` (expected f32 or u8)")),
    }
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let kind: SynthKind = args.kind.parse()?;
    if args.count == 0 {
        return Err(UserError::new("--count must be positive").into());
    }
    if args.val > args.count {
        return Err(UserError::new(format!("--val {} exceeds --count {}", args.val, args.count)).into());
    }
    let dir = RunDir::open(&args.out, args)?;
    let mut manifest = DatasetManifest::default();
    for i in 0..args.count {
        let chip = synth_generate(kind, args.dims, derive_seed(args.seed, stream::SYNTH, i as u64))?;
        let name = format!("chip_{i:04}.sswc");
        write_chip(dir.file(&name), &chip, args.dtype).with_context(|| format!("writing {name}"))?;
        manifest.chips.push(ManifestEntry {
            path: name.into(),
            split: if i + args.val >= args.count { Split::Val } else { Split::Train },
            task: kind.task().into(),
            cloud_score: None,
        });
    }
    manifest.save(dir.file(MANIFEST))?;
    println!("wrote {} {} chips and {}", args.count, kind.name(), dir.file(MANIFEST).display());
    Ok(())
}
