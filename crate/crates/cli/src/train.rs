use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use satswin::checkpoint::Checkpoint;
use satswin::config::Task;
use satswin::data::Split;
use satswin::model::{transfer_weights, Model, ModelKind};
use satswin::optim::OptimState;
use satswin::training::{self, evaluate, make_mask, EvalReport, LabeledSample, Resume, StepReport, TrainOutcome};
use satswin::types::TimeCube;

use crate::image::{masked_view, write_triptych};
use crate::run::{load_chips, RunConfig, RunDir};
use crate::{write_atomic, UserError};

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
pub const METRICS_LOG: &str = "metrics.csv";

#[derive(Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print the shape pipeline and parameter count, then exit.
    #[arg(long)]
    dry_run: bool,
    /// Overrides the mask ratio.
    #[arg(long)]
    mask_ratio: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretrained (or finetuned) weights to start from.
    #[arg(long, conflicts_with = "from_scratch")]
    checkpoint: Option<PathBuf>,
    /// Start from random weights.
    #[arg(long)]
    from_scratch: bool,
    /// Drop the encoder-to-decoder skip connections.
    #[arg(long)]
    no_skip: bool,
    #[arg(long)]
    dry_run: bool,
}

fn load_config(path: &Path, seed: Option<u64>, out: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn dry_run(model: &Model) {
    print!("{}", model.pipeline().render());
    if let Some(head) = model.head() {
        println!("output         {:?} ({:?})", model.output_shape(), head.task);
    }
    println!("parameters     {}", model.num_params());
}

/// Runs `chunk` over `[start, steps)` in pieces of `every` steps. After each
/// piece the latest resumable checkpoint is written, plus a per-step snapshot
/// for intermediate pieces.
fn drive(
    model: &mut Model,
    dir: &RunDir,
    (start, steps, every): (usize, usize, usize),
    mut optimizer: Option<OptimState>,
    mut chunk: impl FnMut(&mut Model, Resume) -> satswin::Result<TrainOutcome>,
) -> Result<()> {
    let mut step = start;
    loop {
        let until = if every > 0 { (step / every + 1) * every } else { steps }.min(steps).max(step);
        let outcome = chunk(model, Resume { optimizer: optimizer.take(), step, until: Some(until) })?;
        step = until;
        let ckpt = Checkpoint { model: model.clone(), optimizer: Some(outcome.optimizer), step: step as u64 };
        let bytes = ckpt.to_bytes();
        write_atomic(&dir.file(CHECKPOINT), &bytes)?;
        if every > 0 && step < steps {
            write_atomic(&dir.file(&format!("model_step{step:06}.ckpt")), &bytes)?;
        }
        optimizer = ckpt.optimizer;
        if step >= steps {
            return Ok(());
        }
    }
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed, &args.out)?;
    if let Some(r) = args.mask_ratio {
        cfg.train.mask_ratio = Some(r);
    }
    cfg.validate()?;
    let (mut model, start, optimizer) = match &args.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.model.kind != ModelKind::Mae {
                return Err(UserError::new(format!("{} is not a pretraining checkpoint", p.display())).into());
            }
            if ck.model.cfg != cfg.model {
                return Err(UserError::new("checkpoint model config differs from the run config").into());
            }
            (ck.model, ck.step as usize, ck.optimizer)
        }
        None => (Model::new(cfg.model.clone(), ModelKind::Mae, cfg.train.seed)?, 0, None),
    };
    if args.dry_run {
        dry_run(&model);
        return Ok(());
    }
    let out = cfg.out_dir()?;
    let chips = load_chips(&cfg.manifest()?, Split::Train, &cfg.model)?;
    if chips.is_empty() {
        return Err(UserError::new("the manifest has no training chips").into());
    }
    let dir = RunDir::open(&out, &cfg)?;
    let cubes: Vec<TimeCube> = chips.iter().map(|c| c.cube.clone()).collect();

    // A resumed log keeps the header and the rows up to the checkpoint step.
    let kept: Vec<String> = match fs::read_to_string(dir.file(LOSS_LOG)) {
        Ok(text) if start > 0 => text
            .lines()
            .enumerate()
            .filter(|(i, l)| *i == 0 || l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= start))
            .map(|(_, l)| l.to_owned())
            .collect(),
        _ => vec!["step,loss,lr".into()],
    };
    let mut log = BufWriter::new(dir.create(LOSS_LOG)?);
    for line in &kept {
        writeln!(log, "{line}")?;
    }

    let ratio = cfg.train.mask_ratio.unwrap_or(cfg.model.mask_ratio);
    let preview = &chips[0];
    let preview_mask = make_mask(&model, ratio, cfg.train.seed)?;
    let masked = masked_view(&preview.cube, &preview_mask, cfg.model.patch_size);
    let rgb = preview.rgb_bands();
    let mut on_step = |r: &StepReport, m: &Model| -> satswin::Result<()> {
        writeln!(log, "{},{:.9e},{:.9e}", r.step + 1, r.loss, r.lr)?;
        log.flush()?;
        if cfg.image_every > 0 && (r.step + 1).is_multiple_of(cfg.image_every) {
            let recon = m.reconstruct(&preview.cube, Some(&preview_mask))?;
            for t in 0..recon.timesteps() {
                let mut f = BufWriter::new(dir.create(&format!("recon_step{:06}_t{t}.ppm", r.step + 1)).map_err(io_err)?);
                write_triptych(&mut f, &[&preview.cube, &masked, &recon], t, rgb)?;
                f.flush()?;
            }
        }
        Ok(())
    };
    let mut last = None;
    drive(&mut model, &dir, (start, cfg.train.steps, cfg.checkpoint_every), optimizer, |m, resume| {
        let o = training::pretrain(m, &cubes, &cfg.train, resume, &mut on_step)?;
        last = o.losses.last().copied().or(last);
        Ok(o)
    })?;
    match last {
        Some(r) => println!("pretrained to step {}: loss {:.4e}; checkpoint {}", r.step + 1, r.loss, dir.file(CHECKPOINT).display()),
        None => println!("nothing to do: checkpoint is already at step {start}"),
    }
    Ok(())
}

fn io_err(e: anyhow::Error) -> satswin::Error {
    satswin::Error::Io(std::io::Error::other(format!("{e:#}")))
}

pub fn metrics_header(task: &Task) -> String {
    match task {
        Task::Segmentation { num_classes } => satswin::metrics::SegmentationSummary::csv_header(*num_classes),
        Task::Regression => "mse,mae".into(),
    }
}

pub fn metrics_row(report: &EvalReport) -> satswin::Result<String> {
    Ok(match report {
        EvalReport::Segmentation(cm) => cm.summary()?.csv_row(),
        EvalReport::Regression(r) => format!("{:.6},{:.6}", r.mse, r.mae),
    })
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed, &args.out)?;
    cfg.validate()?;
    let mut head = cfg.head.clone().ok_or_else(|| UserError::new("finetuning needs a `head` section in the config"))?;
    if args.no_skip {
        head.skip_connections = false;
    }
    let cfg = RunConfig { head: Some(head.clone()), ..cfg };
    let seed = cfg.train.seed;
    let mut model = match (&args.checkpoint, args.from_scratch) {
        (_, true) => Model::new(cfg.model.clone(), ModelKind::Unet { head: head.clone() }, seed)?,
        (None, false) => {
            return Err(UserError::new("no --checkpoint given; pass --from-scratch to train from random weights").into())
        }
        (Some(p), false) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            match &ck.model.kind {
                ModelKind::Mae => {
                    let (m, rep) = transfer_weights(&ck.model, &cfg.model, head.clone(), seed)?;
                    println!(
                        "transferred {} tensors ({} scalars); {} fresh, {} dropped",
                        rep.copied.len(),
                        rep.copied_scalars,
                        rep.fresh.len(),
                        rep.dropped.len()
                    );
                    m
                }
                ModelKind::Unet { head: h } if *h == head && ck.model.cfg == cfg.model => ck.model,
                ModelKind::Unet { .. } => {
                    return Err(UserError::new("finetuned checkpoint differs from the run's model or head config").into())
                }
            }
        }
    };
    if args.dry_run {
        dry_run(&model);
        return Ok(());
    }
    let out = cfg.out_dir()?;
    let manifest = cfg.manifest()?;
    let labeled = |split| -> Result<Vec<LabeledSample>> {
        load_chips(&manifest, split, &cfg.model)?
            .iter()
            .map(|c| Ok(LabeledSample::from_chip(c, &head.task)?))
            .collect()
    };
    let train = labeled(Split::Train)?;
    if train.is_empty() {
        return Err(UserError::new("the manifest has no training chips").into());
    }
    let mut val = labeled(Split::Val)?;
    if val.is_empty() {
        eprintln!("note: no validation chips; reporting metrics on the training split");
        val = train.clone();
    }
    let dir = RunDir::open(&out, &cfg)?;
    let mut log = BufWriter::new(dir.create(METRICS_LOG)?);
    writeln!(log, "step,train_loss,{}", metrics_header(&head.task))?;
    writeln!(log, "0,nan,{}", metrics_row(&evaluate(&model, &val)?)?)?;
    log.flush()?;

    let (steps, every) = (cfg.train.steps, cfg.eval_every);
    let mut on_step = |r: &StepReport, m: &Model| -> satswin::Result<()> {
        let done = r.step + 1;
        if done.is_multiple_of(every) || done == steps {
            writeln!(log, "{done},{:.9e},{}", r.loss, metrics_row(&evaluate(m, &val)?)?)?;
            log.flush()?;
        }
        Ok(())
    };
    drive(&mut model, &dir, (0, steps, cfg.checkpoint_every), None, |m, resume| {
        training::finetune(m, &train, &cfg.train, resume, &mut on_step)
    })?;
    let report = evaluate(&model, &val)?;
    let name = if head.skip_connections { "finetuned" } else { "finetuned (no skip)" };
    print!("{}", crate::eval::table(&[(name.to_string(), report)], &head.task)?);
    println!("checkpoint {}", dir.file(CHECKPOINT).display());
    Ok(())
}
