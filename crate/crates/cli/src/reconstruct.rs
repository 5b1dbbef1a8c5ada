use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use satswin::checkpoint::Checkpoint;
use satswin::data::{crop_and_pad_chip, infill_errors, occlusion_map, read_chip};
use satswin::masking::occlusion_mask;
use satswin::model::ModelKind;
use satswin::training::{mae_loss, make_mask};
use satswin::types::MaskSpec;

use crate::image::{masked_view, write_triptych};
use crate::run::RunDir;
use crate::UserError;

pub const SUMMARY: &str = "reconstruction.txt";

#[derive(Args, Serialize)]
pub struct ReconstructArgs {
    /// Pretraining checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// SSWC chip to reconstruct.
    #[arg(long)]
    chip: PathBuf,
    /// Mask seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the model's mask ratio.
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Use an all-false mask: reconstruct the fully visible input.
    #[arg(long, conflicts_with_all = ["mask_ratio", "infill"])]
    no_mask: bool,
    /// Mask the first frame's tokens that touch pixels flagged in the chip's
    /// label block and score the infill against the second frame.
    #[arg(long, conflicts_with = "mask_ratio")]
    infill: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: &ReconstructArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?.model;
    if model.kind != ModelKind::Mae {
        return Err(UserError::new(format!("{} is not a pretraining checkpoint", args.checkpoint.display())).into());
    }
    let cfg = &model.cfg;
    let chip = read_chip(&args.chip).with_context(|| format!("reading {}", args.chip.display()))?;
    chip.check_bands(cfg.num_bands)?;
    if chip.cube.timesteps() != cfg.num_timesteps {
        return Err(UserError::new(format!(
            "chip has {} frames, the model expects {}",
            chip.cube.timesteps(),
            cfg.num_timesteps
        ))
        .into());
    }
    let (chip, _) = crop_and_pad_chip(&chip, cfg.input_height, cfg.input_width);
    let grid = cfg.token_grid();
    let [_, ph, pw] = cfg.patch_size;
    let occ = if args.infill { Some(occlusion_map(&chip)?) } else { None };
    let mask = match &occ {
        Some(o) => occlusion_mask(grid, (ph, pw), cfg.input_width, 0, o)?,
        None if args.no_mask => MaskSpec::none(grid),
        None => make_mask(&model, args.mask_ratio.unwrap_or(cfg.mask_ratio), args.seed)?,
    };
    let recon = model.reconstruct(&chip.cube, Some(&mask))?;

    let dir = RunDir::open(&args.out, args)?;
    let masked = masked_view(&chip.cube, &mask, cfg.patch_size);
    for t in 0..recon.timesteps() {
        let mut f = BufWriter::new(dir.create(&format!("recon_t{t}.ppm"))?);
        write_triptych(&mut f, &[&chip.cube, &masked, &recon], t, chip.rgb_bands())?;
        f.flush()?;
    }

    let mut summary = String::new();
    let n = recon.data().len() as f64;
    let mse = recon.data().iter().zip(chip.cube.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / n;
    writeln!(summary, "masked tokens        {} of {}", mask.masked_count(), grid.iter().product::<usize>())?;
    writeln!(summary, "all-pixel MSE        {mse:.6e}")?;
    if mask.masked_count() > 0 {
        writeln!(summary, "masked-pixel MSE     {:.6e}", mae_loss(&recon, &chip.cube, &mask, cfg.patch_size)?)?;
    }
    if let Some(o) = &occ {
        let e = infill_errors(&chip.cube, &recon, o)?;
        writeln!(summary, "occluded-pixel MSE   {:.6e} over {} values", e.model, e.count)?;
        writeln!(summary, "bilinear MSE         {:.6e}", e.baseline)?;
        writeln!(summary, "ratio                {:.4}", e.model / e.baseline)?;
    }
    print!("{summary}");
    std::fs::write(dir.file(SUMMARY), summary)?;
    Ok(())
}
