use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use satswin::checkpoint::Checkpoint;
use satswin::config::Task;
use satswin::data::{DatasetManifest, Split};
use satswin::metrics::{regression_table, segmentation_table};
use satswin::training::{evaluate, EvalReport, LabeledSample};

use crate::run::{load_chips, RunDir};
use crate::train::{metrics_header, metrics_row};
use crate::{parse_split, UserError};

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_TABLE: &str = "eval.txt";

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// Finetuned checkpoint; repeat to compare several in one table.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// train, val, or test.
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    /// Directory for the CSV and text table; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Aligned text table, one row per named report.
pub fn table(rows: &[(String, EvalReport)], task: &Task) -> Result<String> {
    match task {
        Task::Segmentation { num_classes } => {
            let summaries = rows
                .iter()
                .map(|(n, r)| match r {
                    EvalReport::Segmentation(cm) => Ok((n.clone(), cm.summary()?)),
                    EvalReport::Regression(_) => Err(UserError::new("mixed task reports").into()),
                })
                .collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = (0..*num_classes).map(|c| format!("class {c}")).collect();
            Ok(segmentation_table(&summaries, &names))
        }
        Task::Regression => {
            let metrics = rows
                .iter()
                .map(|(n, r)| match r {
                    EvalReport::Regression(m) => Ok((n.clone(), *m)),
                    EvalReport::Segmentation(_) => Err(UserError::new("mixed task reports").into()),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(regression_table(&metrics))
        }
    }
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest).with_context(|| format!("loading {}", args.manifest.display()))?;
    let mut task: Option<Task> = None;
    let mut rows = Vec::new();
    for path in &args.checkpoints {
        let model = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.model;
        let head = model
            .head()
            .ok_or_else(|| UserError::new(format!("{} is not a finetuned checkpoint", path.display())))?;
        match &task {
            Some(t) if *t != head.task => {
                return Err(UserError::new(format!("{} solves {:?}, earlier checkpoints {t:?}", path.display(), head.task)).into())
            }
            _ => task = Some(head.task.clone()),
        }
        let samples: Vec<LabeledSample> = load_chips(&manifest, args.split, &model.cfg)?
            .iter()
            .map(|c| LabeledSample::from_chip(c, &head.task))
            .collect::<satswin::Result<_>>()?;
        if samples.is_empty() {
            return Err(UserError::new(format!("the manifest has no {:?} chips", args.split)).into());
        }
        rows.push((path.display().to_string(), evaluate(&model, &samples)?));
    }
    let task = task.expect("at least one checkpoint");
    let text = table(&rows, &task)?;
    print!("{text}");
    if let Some(out) = &args.out {
        let dir = RunDir::open(out, args)?;
        let mut csv = format!("model,{}\n", metrics_header(&task));
        for (name, r) in &rows {
            let _ = writeln!(csv, "{},{}", name.replace(',', "_"), metrics_row(r)?);
        }
        std::fs::write(dir.file(EVAL_CSV), csv)?;
        std::fs::write(dir.file(EVAL_TABLE), &text)?;
    }
    Ok(())
}
