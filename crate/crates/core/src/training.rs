//! MAE pretraining objective, finetuning losses, and the training loops.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, PAD_ROW};
use crate::config::{stage_window, Task};
use crate::data::{Chip, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::masking::generate_mask;
use crate::metrics::{regression_metrics, ConfusionMatrix, RegressionMetrics};
use crate::model::{Model, ModelKind, Prediction, DENSITY_MAX};
use crate::optim::{adamw_step, lr_at, AdamW, OptimState, ScheduleConfig};
use crate::params::Bound;
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;
use crate::types::{MaskSpec, TimeCube};

/// Which pixels the reconstruction loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSupport {
    #[default]
    Masked,
    All,
}

/// Training-loop settings shared by pretraining and finetuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub max_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_support: LossSupport,
    /// Overrides the model's mask ratio.
    #[serde(default)]
    pub mask_ratio: Option<f64>,
    /// Keeps every `encoder.*` parameter fixed.
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Per-class cross-entropy weights; empty means uniform.
    #[serde(default)]
    pub class_weights: Vec<f64>,
}

fn default_batch() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-5
}
fn default_warmup() -> f64 {
    0.1
}
fn default_wd() -> f64 {
    AdamW::default().weight_decay
}

impl LoopConfig {
    pub fn new(steps: usize, max_lr: f64, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 1,
            max_lr,
            warmup_fraction: default_warmup(),
            weight_decay: default_wd(),
            seed,
            loss_support: LossSupport::Masked,
            mask_ratio: None,
            freeze_encoder: false,
            class_weights: Vec::new(),
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            warmup_fraction: self.warmup_fraction,
            ..ScheduleConfig::new(self.max_lr, self.steps)
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if let Some(r) = self.mask_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::MaskRatio(r));
            }
        }
        self.schedule().validate()
    }
}

/// Per-element weights (1 on the loss support, 0 elsewhere) and their count.
pub fn loss_weights(spec: &MaskSpec, cube_shape: [usize; 4], patch: [usize; 3], support: LossSupport) -> Result<(Vec<f64>, f64)> {
    let [t, h, w, b] = cube_shape;
    let [pt, ph, pw] = patch;
    if spec.dims() != [t / pt, h / ph, w / pw] {
        return Err(Error::Shape(format!(
            "mask {:?} is not at the token resolution of {cube_shape:?} with patch {patch:?}",
            spec.dims()
        )));
    }
    if support == LossSupport::All {
        let n = t * h * w * b;
        return Ok((vec![1.0; n], n as f64));
    }
    let mut weights = Vec::with_capacity(t * h * w * b);
    let mut count = 0usize;
    for a in 0..t {
        for y in 0..h {
            for x in 0..w {
                let m = spec.is_masked(a / pt, y / ph, x / pw);
                count += m as usize * b;
                weights.extend(std::iter::repeat_n(m as u8 as f64, b));
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((weights, count as f64))
}

/// Mean squared error over the pixels of masked patches.
pub fn mae_loss(pred: &TimeCube, target: &TimeCube, spec: &MaskSpec, patch: [usize; 3]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let (w, denom) = loss_weights(spec, target.shape(), patch, LossSupport::Masked)?;
    let mut acc = 0.0;
    for ((p, t), w) in pred.data().iter().zip(target.data()).zip(&w) {
        if *w != 0.0 {
            let d = *p as f64 - *t as f64;
            acc += d * d;
        }
    }
    Ok(acc / denom)
}

/// Reconstruction loss recorded on a tape.
pub fn mae_loss_var(tape: &mut Tape, pred: Var, target: &TimeCube, spec: &MaskSpec, patch: [usize; 3], support: LossSupport) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let (w, denom) = loss_weights(spec, target.shape(), patch, support)?;
    let t: Arc<[f64]> = target.data().iter().map(|&v| v as f64).collect();
    Ok(tape.weighted_mse(pred, t, w.into(), denom))
}

/// Worker threads: `SATSWIN_THREADS` if set, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SATSWIN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// `f(0..n)` across worker threads; results in index order.
pub fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = worker_threads().min(n).max(1);
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let f = &f;
                s.spawn(move || (k * chunk..((k + 1) * chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

type SampleGrad = (f64, BTreeMap<String, Tensor>);

/// Mean loss and mean gradient over `samples`, reduced in sample order.
fn batch_gradients(
    model: &Model,
    frozen: &BTreeSet<String>,
    samples: &[usize],
    loss_fn: &(dyn Fn(&mut Tape, &Bound, usize, usize) -> Result<Var> + Sync),
) -> Result<SampleGrad> {
    let results: Vec<Result<SampleGrad>> = parallel_map(samples.len(), |slot| {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, frozen);
        let loss = loss_fn(&mut tape, &p, samples[slot], slot)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, var) in p.iter() {
            if tape.requires_grad(var) {
                let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
                out.insert(name.to_owned(), g);
            }
        }
        Ok((value, out))
    });
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        *g = g.map(|v| v * scale);
    }
    Ok((total * scale, sum))
}

/// Dataset indices for `step`, drawn from `(seed, step)` alone.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, stream::BATCH, step as u64);
    if batch <= n {
        sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Mask seed for sample slot `slot` of `step`.
pub fn mask_seed(seed: u64, step: usize, slot: usize) -> u64 {
    stream_rng(seed, stream::MASK, ((step as u64) << 16) | slot as u64).random()
}

/// Loss and learning rate of one completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Result of a training run: per-step losses and the optimizer state to resume from.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<StepReport>,
    pub optimizer: OptimState,
}

/// Step span of a run: starts at `step` (with the saved optimizer state when
/// resuming) and stops before `until`, or at the end of the schedule.
#[derive(Clone, Debug, Default)]
pub struct Resume {
    pub optimizer: Option<OptimState>,
    pub step: usize,
    pub until: Option<usize>,
}

/// Mask generator for a pretraining network, honouring the configured mode.
pub fn make_mask(model: &Model, ratio: f64, seed: u64) -> Result<MaskSpec> {
    let grid = model.cfg.token_grid();
    let (eff, _) = stage_window(model.cfg.window, grid);
    generate_mask(model.cfg.mask_mode, grid, (eff[1], eff[2]), ratio, seed)
}

fn run_loop(
    model: &mut Model,
    n: usize,
    cfg: &LoopConfig,
    resume: Resume,
    frozen: &BTreeSet<String>,
    loss_fn: &(dyn Fn(&Model, &mut Tape, &Bound, usize, usize, usize) -> Result<Var> + Sync),
    on_step: &mut dyn FnMut(&StepReport, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let schedule = cfg.schedule();
    let mut optimizer = resume.optimizer.unwrap_or_else(|| OptimState::new(cfg.adamw()));
    let mut losses = Vec::new();
    let end = resume.until.map_or(cfg.steps, |u| u.min(cfg.steps));
    for step in resume.step..end {
        let idx = batch_indices(n, cfg.batch_size, cfg.seed, step);
        let lr = lr_at(step, &schedule)?;
        let m: &Model = model;
        let (loss, grads) = batch_gradients(m, frozen, &idx, &|tape, p, i, slot| loss_fn(m, tape, p, i, step, slot))?;
        adamw_step(&mut model.params, &grads, &mut optimizer, lr)?;
        let report = StepReport { step, loss, lr };
        losses.push(report);
        on_step(&report, model)?;
    }
    Ok(TrainOutcome { losses, optimizer })
}

/// MAE pretraining: per step, sample a batch, mask every sample
/// independently, reconstruct, and update on the masked-pixel MSE.
pub fn pretrain(
    model: &mut Model,
    data: &[TimeCube],
    cfg: &LoopConfig,
    resume: Resume,
    on_step: &mut dyn FnMut(&StepReport, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    if model.kind != ModelKind::Mae {
        return Err(Error::Invalid("pretraining needs a network with a mask token".into()));
    }
    let ratio = cfg.mask_ratio.unwrap_or(model.cfg.mask_ratio);
    let (patch, support, seed) = (model.cfg.patch_size, cfg.loss_support, cfg.seed);
    let loss_fn = |m: &Model, tape: &mut Tape, p: &Bound, i: usize, step: usize, slot: usize| {
        let cube = &data[i];
        let spec = make_mask(m, ratio, mask_seed(seed, step, slot))?;
        let x = tape.constant(cube.to_tensor());
        let y = m.mae_graph(tape, p, x, Some(&spec))?;
        mae_loss_var(tape, y, cube, &spec, patch, support)
    };
    run_loop(model, data.len(), cfg, resume, &BTreeSet::new(), &loss_fn, on_step)
}

/// Supervision for one finetuning sample, row-major `[T_out, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Class ids; [`IGNORE_LABEL`] pixels are skipped.
    Classes(Vec<usize>),
    /// Density in `[0, 100]`.
    Density(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub cube: TimeCube,
    pub target: Target,
}

impl LabeledSample {
    /// Reads the chip's label block as a target for `task`.
    pub fn from_chip(chip: &Chip, task: &Task) -> Result<Self> {
        let labels = chip
            .labels
            .as_ref()
            .ok_or_else(|| Error::Invalid("chip has no label block".into()))?;
        let target = match task {
            Task::Segmentation { .. } => Target::Classes(
                labels
                    .data
                    .classes()
                    .ok_or_else(|| Error::Invalid("segmentation needs integer labels".into()))?,
            ),
            Task::Regression => Target::Density(labels.data.values()),
        };
        Ok(Self {
            cube: chip.cube.clone(),
            target,
        })
    }
}

fn check_target(model: &Model, s: &LabeledSample) -> Result<()> {
    let head = model.head().ok_or_else(|| Error::Invalid("finetuning needs a finetuning network".into()))?;
    let [_, h, w, _] = model.cfg.input_shape();
    let n = head.t_out * h * w;
    match (&s.target, &head.task) {
        (Target::Classes(v), Task::Segmentation { num_classes }) => {
            if v.len() != n {
                return Err(Error::Shape(format!("{} labels, task needs {n} ([{}, {h}, {w}])", v.len(), head.t_out)));
            }
            if let Some(&bad) = v.iter().find(|&&l| l >= *num_classes && l != IGNORE_LABEL) {
                return Err(Error::LabelOutOfRange { label: bad, num_classes: *num_classes });
            }
        }
        (Target::Density(v), Task::Regression) => {
            if v.len() != n {
                return Err(Error::Shape(format!("{} targets, task needs {n}", v.len())));
            }
        }
        _ => return Err(Error::Invalid("target kind does not match the task".into())),
    }
    Ok(())
}

/// Finetuning loss recorded on a tape.
pub fn task_loss(tape: &mut Tape, out: Var, target: &Target, class_weights: &[f64]) -> Result<Var> {
    Ok(match target {
        Target::Classes(v) => {
            let labels: Arc<[usize]> = v.iter().map(|&l| if l == IGNORE_LABEL { PAD_ROW } else { l }).collect();
            if labels.len() != tape.value(out).rows() {
                return Err(Error::Shape(format!("{} labels for {} output pixels", labels.len(), tape.value(out).rows())));
            }
            tape.cross_entropy(out, labels, class_weights)
        }
        Target::Density(v) => {
            let n = v.len();
            if n != tape.value(out).len() {
                return Err(Error::Shape(format!("{n} targets for {} outputs", tape.value(out).len())));
            }
            let t: Arc<[f64]> = v.iter().map(|d| d / DENSITY_MAX).collect();
            tape.weighted_mse(out, t, vec![1.0; n].into(), n as f64)
        }
    })
}

/// Supervised finetuning of a network built by [`crate::model::transfer_weights`]
/// or [`Model::new`].
pub fn finetune(
    model: &mut Model,
    data: &[LabeledSample],
    cfg: &LoopConfig,
    resume: Resume,
    on_step: &mut dyn FnMut(&StepReport, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    for s in data {
        check_target(model, s)?;
    }
    let frozen: BTreeSet<String> = if cfg.freeze_encoder { BTreeSet::from(["encoder.".to_string()]) } else { BTreeSet::new() };
    let weights = cfg.class_weights.clone();
    let loss_fn = |m: &Model, tape: &mut Tape, p: &Bound, i: usize, _step: usize, _slot: usize| {
        let x = tape.constant(data[i].cube.to_tensor());
        let out = m.unet_graph(tape, p, x)?;
        task_loss(tape, out, &data[i].target, &weights)
    };
    run_loop(model, data.len(), cfg, resume, &frozen, &loss_fn, on_step)
}

/// Scores of a finetuned network on a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Segmentation(ConfusionMatrix),
    Regression(RegressionMetrics),
}

pub fn evaluate(model: &Model, data: &[LabeledSample]) -> Result<EvalReport> {
    let head = model.head().ok_or_else(|| Error::Invalid("evaluation needs a finetuning network".into()))?;
    for s in data {
        check_target(model, s)?;
    }
    let preds: Vec<Result<Prediction>> = parallel_map(data.len(), |i| model.predict(&data[i].cube));
    match head.task {
        Task::Segmentation { num_classes } => {
            let mut cm = ConfusionMatrix::new(num_classes);
            for (p, s) in preds.into_iter().zip(data) {
                if let (Prediction::Classes(p), Target::Classes(t)) = (p?, &s.target) {
                    cm.accumulate(&p, t, Some(IGNORE_LABEL))?;
                }
            }
            Ok(EvalReport::Segmentation(cm))
        }
        Task::Regression => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for (p, s) in preds.into_iter().zip(data) {
                if let (Prediction::Density(p), Target::Density(t)) = (p?, &s.target) {
                    pred.extend(p);
                    truth.extend_from_slice(t);
                }
            }
            Ok(EvalReport::Regression(regression_metrics(&pred, &truth, None)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadConfig;
    use crate::gradcheck::random_tensor;
    use crate::masking::generate_window_mask;
    use crate::model::tests_support::tiny;

    fn cube(shape: [usize; 4], seed: u64) -> TimeCube {
        TimeCube::from_tensor(&random_tensor(&shape, seed, 0.5).map(|v| v + 0.5)).unwrap()
    }

    #[test]
    fn loss_cases() {
        let target = cube([1, 8, 8, 2], 1);
        let mut spec = MaskSpec::none([1, 2, 2]);
        assert!(matches!(mae_loss(&target, &target, &spec, [1, 4, 4]), Err(Error::EmptyMask)));
        spec.set(0, 1, 0, true);
        assert_eq!(mae_loss(&target, &target, &spec, [1, 4, 4]).unwrap(), 0.0);

        let shifted = TimeCube::from_raw(target.shape(), target.data().iter().map(|v| v + 1.0).collect()).unwrap();
        // values are stored as f32, so the shift is exact only to f32 precision
        assert!((mae_loss(&shifted, &target, &spec, [1, 4, 4]).unwrap() - 1.0).abs() < 1e-6);

        // brute-force loop over the single masked patch (rows 4..8, cols 0..4)
        let pred = cube([1, 8, 8, 2], 2);
        let mut acc = 0.0;
        for y in 4..8 {
            for x in 0..4 {
                for b in 0..2 {
                    let d = pred.get(0, y, x, b) as f64 - target.get(0, y, x, b) as f64;
                    acc += d * d;
                }
            }
        }
        assert!((mae_loss(&pred, &target, &spec, [1, 4, 4]).unwrap() - acc / 32.0).abs() < 1e-15);
        assert!(mae_loss(&pred, &cube([1, 8, 4, 2], 1), &spec, [1, 4, 4]).is_err());
    }

    #[test]
    fn unmasked_pixels_get_zero_gradient() {
        let target = cube([1, 8, 8, 1], 3);
        let spec = generate_window_mask(1, 2, 2, 0.5, 4).unwrap();
        let mut tape = Tape::new();
        let pred = tape.leaf(random_tensor(&[1, 8, 8, 1], 5, 1.0));
        let l = mae_loss_var(&mut tape, pred, &target, &spec, [1, 4, 4], LossSupport::Masked).unwrap();
        let g = tape.backward(l).get(pred).cloned().unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if !spec.is_masked(0, y / 4, x / 4) {
                    assert_eq!(g.data()[y * 8 + x], 0.0);
                }
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let data = vec![cube([2, 16, 16, 2], 1)];
        let cfg = LoopConfig { batch_size: 2, ..LoopConfig::new(12, 2e-3, 3) };
        let run = || {
            let mut m = Model::new(tiny(2, 16, 16, 2), ModelKind::Mae, 1).unwrap();
            let out = pretrain(&mut m, &data, &cfg, Resume::default(), &mut |_, _| Ok(())).unwrap();
            (m, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(m1.params, m2.params);
        let l1: Vec<f64> = o1.losses.iter().map(|r| r.loss).collect();
        assert_eq!(l1, o2.losses.iter().map(|r| r.loss).collect::<Vec<_>>());
        assert!(l1.last().unwrap() < &l1[0]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = vec![cube([2, 16, 16, 2], 1)];
        let cfg = LoopConfig::new(6, 2e-3, 3);
        let fresh = || Model::new(tiny(2, 16, 16, 2), ModelKind::Mae, 1).unwrap();
        let mut full = fresh();
        let whole = pretrain(&mut full, &data, &cfg, Resume::default(), &mut |_, _| Ok(())).unwrap();

        let mut part = fresh();
        let first = Resume { until: Some(3), ..Resume::default() };
        let head = pretrain(&mut part, &data, &cfg, first, &mut |_, _| Ok(())).unwrap();
        assert_eq!(head.losses.len(), 3);
        let rest = Resume { optimizer: Some(head.optimizer), step: 3, until: None };
        let tail = pretrain(&mut part, &data, &cfg, rest, &mut |_, _| Ok(())).unwrap();
        assert_eq!(part.params, full.params);
        assert_eq!(tail.losses, whole.losses[3..]);
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let cfg_m = tiny(2, 16, 16, 2);
        let mut m = Model::new(cfg_m, ModelKind::Unet { head: HeadConfig::segmentation(2, 1, 4) }, 1).unwrap();
        let before = m.params.clone();
        let labels: Vec<usize> = (0..256).map(|p| (p % 16 > 7) as usize).collect();
        let data = vec![LabeledSample { cube: cube([2, 16, 16, 2], 1), target: Target::Classes(labels) }];
        let cfg = LoopConfig { freeze_encoder: true, ..LoopConfig::new(3, 1e-2, 1) };
        finetune(&mut m, &data, &cfg, Resume::default(), &mut |_, _| Ok(())).unwrap();
        for (name, t) in before.iter() {
            if name.starts_with("encoder.") {
                assert_eq!(m.params.get(name).unwrap(), t, "{name}");
            }
        }
        assert_ne!(m.params.get("head.out.weight"), before.get("head.out.weight"));
    }

    #[test]
    fn label_checks() {
        let m = Model::new(tiny(2, 16, 16, 2), ModelKind::Unet { head: HeadConfig::segmentation(2, 1, 4) }, 1).unwrap();
        let short = LabeledSample { cube: cube([2, 16, 16, 2], 1), target: Target::Classes(vec![0; 10]) };
        assert!(evaluate(&m, &[short]).is_err());
        let bad = LabeledSample { cube: cube([2, 16, 16, 2], 1), target: Target::Classes(vec![3; 256]) };
        assert!(matches!(evaluate(&m, &[bad]), Err(Error::LabelOutOfRange { label: 3, .. })));
        let wrong = LabeledSample { cube: cube([2, 16, 16, 2], 1), target: Target::Density(vec![0.0; 256]) };
        assert!(evaluate(&m, &[wrong]).is_err());
    }

    #[test]
    fn batches_are_seeded() {
        assert_eq!(batch_indices(10, 4, 1, 7), batch_indices(10, 4, 1, 7));
        assert_ne!(batch_indices(100, 4, 1, 7), batch_indices(100, 4, 1, 8));
        assert_eq!(batch_indices(2, 5, 1, 0).len(), 5);
    }
}
