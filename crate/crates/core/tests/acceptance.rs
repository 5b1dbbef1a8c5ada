//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! The exit status is non-zero on failure only when `SATSWIN_ACCEPTANCE_STRICT=1`,
//! so the workspace test run reports results without gating on the scaled
//! experiments. Pass criterion ids (e.g. `AC-3`) as arguments to run a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use satswin::attention::{
    bias_table_rows, swin_block, window_attention, window_partition, AttentionParams, AttentionWeights, BlockParams,
    BlockPlan,
};
use satswin::autograd::{Tape, Var};
use satswin::checkpoint::Checkpoint;
use satswin::config::{check_config, HeadConfig, HeadOrder, MaskMode, ModelConfig, ShapePipeline};
use satswin::data::{infill_errors, occlusion_map, read_chip, synth_generate, write_chip, Chip, Dtype, LabelBlock, LabelData, SynthKind};
use satswin::gradcheck::{check_gradients, random_tensor};
use satswin::masking::{generate_window_mask, occlusion_mask};
use satswin::metrics::ConfusionMatrix;
use satswin::model::{Model, ModelKind};
use satswin::params::Bound;
use satswin::rng::stream_rng;
use satswin::tensor::Tensor;
use satswin::training::{
    evaluate, finetune, mae_loss, mae_loss_var, pretrain, task_loss, EvalReport, LabeledSample, LoopConfig, LossSupport,
    Resume, Target,
};
use satswin::types::{MaskSpec, TimeCube, TokenGrid};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: satswin::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Tiny pretraining network used by the training experiments (~176k parameters).
fn tiny_config(t: usize, h: usize, w: usize, b: usize) -> ModelConfig {
    ModelConfig {
        patch_size: [1, 4, 4],
        embed_dim: 32,
        stage_depths: vec![2, 2],
        stage_heads: vec![1, 2],
        window: [t, 4, 4],
        head_dim: 32,
        mlp_ratio: 4.0,
        mask_ratio: 0.75,
        num_bands: b,
        num_timesteps: t,
        input_height: h,
        input_width: w,
        decoder_depths: vec![2],
        merge_norm: true,
        mask_mode: MaskMode::Random,
    }
}

// ---------------------------------------------------------------- AC-1

fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let stages = rng.random_range(1..=3usize);
    let pt = rng.random_range(1..=2usize);
    let ph = [2, 4][rng.random_range(0..2)];
    let pw = [2, 4][rng.random_range(0..2)];
    let tt = rng.random_range(1..=3usize);
    let unit = 1 << (stages - 1);
    let gh = unit * rng.random_range(1..=3usize);
    let gw = unit * rng.random_range(1..=3usize);
    let head_dim = [4, 8][rng.random_range(0..2)];
    let h0 = rng.random_range(1..=2usize);
    ModelConfig {
        patch_size: [pt, ph, pw],
        embed_dim: h0 * head_dim,
        stage_depths: (0..stages).map(|_| rng.random_range(1..=2)).collect(),
        stage_heads: (0..stages).map(|i| h0 << i).collect(),
        window: [rng.random_range(1..=tt), rng.random_range(2..=4), rng.random_range(2..=4)],
        head_dim,
        mlp_ratio: [1.0, 2.0][rng.random_range(0..2)],
        mask_ratio: 0.75,
        num_bands: rng.random_range(1..=4),
        num_timesteps: tt * pt,
        input_height: gh * ph,
        input_width: gw * pw,
        decoder_depths: (1..stages).map(|_| rng.random_range(1..=2)).collect(),
        merge_norm: rng.random(),
        mask_mode: MaskMode::Random,
    }
}

fn random_cube(shape: [usize; 4], seed: u64) -> TimeCube {
    let mut rng = stream_rng(seed, 0xAC, 0);
    let n = shape.iter().product();
    TimeCube::new(shape, (0..n).map(|_| rng.random_range(0.0..=1.0f32)).collect()).unwrap()
}

fn check_forward_shapes(cfg: &ModelConfig, seed: u64) -> Result<(), String> {
    let pipe = ShapePipeline::new(cfg);
    let cube = random_cube(cfg.input_shape(), seed);
    let mae = ok(Model::new(cfg.clone(), ModelKind::Mae, seed))?;
    let spec = ok(generate_window_mask(pipe.tokens[0], pipe.tokens[1], pipe.tokens[2], 0.5, seed))?;
    let (bottleneck, features) = ok(mae.encode(&cube, Some(&spec)))?;
    ensure(bottleneck.dims() == pipe.bottleneck, || {
        format!("bottleneck {:?} vs pipeline {:?}", bottleneck.dims(), pipe.bottleneck)
    })?;
    ensure(features.features.len() == pipe.stages.len(), || "stage count".into())?;
    for (f, s) in features.features.iter().zip(&pipe.stages) {
        ensure(f.dims() == s.grid, || format!("stage grid {:?} vs pipeline {:?}", f.dims(), s.grid))?;
    }
    let recon = ok(mae.decode_mae(&bottleneck))?;
    ensure(recon.shape() == pipe.reconstruction, || {
        format!("reconstruction {:?} vs pipeline {:?}", recon.shape(), pipe.reconstruction)
    })?;
    let t_out = if seed.is_multiple_of(2) { 1 } else { pipe.tokens[0] };
    let mut head = HeadConfig::segmentation(3, t_out, 4);
    head.skip_connections = !seed.is_multiple_of(3);
    let unet = ok(Model::new(cfg.clone(), ModelKind::Unet { head: head.clone() }, seed))?;
    let out = ok(unet.unet_forward(&cube))?;
    let expected = pipe.unet_output(&head);
    ensure(out.shape() == expected, || format!("unet output {:?} vs pipeline {expected:?}", out.shape()))
}

fn ac1() -> Check {
    let mut rng = stream_rng(2024, 0xA1, 0);
    let (mut tried, mut checked) = (0, 0);
    while checked < 50 {
        tried += 1;
        let cfg = random_config(&mut rng);
        if check_config(&cfg).is_err() {
            continue;
        }
        check_forward_shapes(&cfg, checked as u64).map_err(|e| format!("config {cfg:?}: {e}"))?;
        checked += 1;
    }

    let base = ShapePipeline::new(&ModelConfig::swin_base(3, 224, 224, 6));
    ensure(base.tokens == [3, 56, 56, 128], || format!("canonical tokens {:?}", base.tokens))?;
    let grids: Vec<[usize; 4]> = base.stages.iter().map(|s| s.grid).collect();
    ensure(
        grids == [[3, 56, 56, 128], [3, 28, 28, 256], [3, 14, 14, 512], [3, 7, 7, 1024]],
        || format!("canonical stages {grids:?}"),
    )?;
    ensure(base.bottleneck == [3, 7, 7, 1024], || format!("canonical bottleneck {:?}", base.bottleneck))?;

    // Same 224×224 chain executed with narrow widths.
    let narrow = ModelConfig {
        embed_dim: 8,
        head_dim: 8,
        stage_depths: vec![1, 1, 1, 1],
        stage_heads: vec![1, 2, 4, 8],
        decoder_depths: vec![1, 1, 1],
        mlp_ratio: 1.0,
        ..ModelConfig::swin_base(3, 224, 224, 6)
    };
    check_forward_shapes(&narrow, 7)?;
    Ok(format!(
        "{checked} random configs ({tried} drawn) plus the 3x224x224x6 -> 3x56x56 -> 3x7x7 chain match the pipeline"
    ))
}

// ---------------------------------------------------------------- AC-2

/// Plain-loop multi-head attention with relative position bias over one window.
fn dense_attention(x: &Tensor, w: &AttentionWeights, window: [usize; 3]) -> Vec<f64> {
    let (v, c) = (x.shape()[0], x.shape()[1]);
    let (heads, d) = (w.heads, w.head_dim);
    let qkv_w = w.qkv_weight.data();
    let mut qkv = vec![0.0; v * 3 * c];
    for i in 0..v {
        for o in 0..3 * c {
            let mut s = w.qkv_bias.data()[o];
            for k in 0..c {
                s += x.data()[i * c + k] * qkv_w[k * 3 * c + o];
            }
            qkv[i * 3 * c + o] = s;
        }
    }
    let coord = |i: usize| [i / (window[1] * window[2]), (i / window[2]) % window[1], i % window[2]];
    let tw = w.table_window;
    let span = tw.map(|m| 2 * m - 1);
    let mut att = vec![0.0; v * c];
    for h in 0..heads {
        for i in 0..v {
            let mut scores = vec![0.0; v];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += qkv[i * 3 * c + h * d + e] * qkv[j * 3 * c + c + h * d + e];
                }
                let (a, b) = (coord(i), coord(j));
                let row = ((a[0] + tw[0] - 1 - b[0]) * span[1] + (a[1] + tw[1] - 1 - b[1])) * span[2]
                    + (a[2] + tw[2] - 1 - b[2]);
                *s = dot / (d as f64).sqrt() + w.bias_table.data()[row * heads + h];
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for e in 0..d {
                let mut acc = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    acc += (s - mx).exp() / z * qkv[j * 3 * c + 2 * c + h * d + e];
                }
                att[i * c + h * d + e] = acc;
            }
        }
    }
    let mut out = vec![0.0; v * c];
    for i in 0..v {
        for o in 0..c {
            let mut s = w.proj_bias.data()[o];
            for k in 0..c {
                s += att[i * c + k] * w.proj_weight.data()[k * c + o];
            }
            out[i * c + o] = s;
        }
    }
    out
}

struct RandomBlock {
    tensors: Vec<Tensor>,
}

impl RandomBlock {
    fn new(c: usize, heads: usize, table_window: [usize; 3], seed: u64) -> Self {
        let rows = bias_table_rows(table_window);
        let shapes: [&[usize]; 13] = [
            &[c], &[c], &[c, 3 * c], &[3 * c], &[c, c], &[c], &[rows, heads], &[c], &[c], &[c, 2 * c], &[2 * c],
            &[2 * c, c], &[c],
        ];
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = random_tensor(s, seed * 31 + i as u64, 0.5);
                if i == 0 || i == 7 { t.map(|v| 1.0 + v) } else { t }
            })
            .collect();
        Self { tensors }
    }

    fn bind(&self, tape: &mut Tape) -> BlockParams {
        let v: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        BlockParams {
            norm1: (v[0], v[1]),
            attn: AttentionParams { qkv_w: v[2], qkv_b: v[3], proj_w: v[4], proj_b: v[5], table: v[6] },
            norm2: (v[7], v[8]),
            fc1: (v[9], v[10]),
            fc2: (v[11], v[12]),
        }
    }
}

fn run_blocks(x: &Tensor, blocks: &[(&RandomBlock, &BlockPlan)]) -> Tensor {
    let mut tape = Tape::inference();
    let mut h = tape.constant(x.clone());
    for (b, plan) in blocks {
        let p = b.bind(&mut tape);
        h = swin_block(&mut tape, h, &p, plan).unwrap();
    }
    tape.value(h).clone()
}

fn token_changed(a: &Tensor, b: &Tensor, grid: [usize; 3], at: [usize; 3]) -> bool {
    let c = a.shape()[3];
    let i = ((at[0] * grid[1] + at[1]) * grid[2] + at[2]) * c;
    a.data()[i..i + c] != b.data()[i..i + c]
}

fn ac2() -> Check {
    let mut rng = stream_rng(7, 0xA2, 0);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let window = [rng.random_range(1..=3usize), rng.random_range(1..=4usize), rng.random_range(1..=4usize)];
        let table_window = window.map(|m| m + rng.random_range(0..=1usize));
        let heads = rng.random_range(1..=3usize);
        let head_dim = rng.random_range(1..=4usize);
        let c = heads * head_dim;
        let w = AttentionWeights {
            qkv_weight: random_tensor(&[c, 3 * c], trial * 5, 0.6),
            qkv_bias: random_tensor(&[3 * c], trial * 5 + 1, 0.2),
            proj_weight: random_tensor(&[c, c], trial * 5 + 2, 0.6),
            proj_bias: random_tensor(&[c], trial * 5 + 3, 0.2),
            bias_table: random_tensor(&[bias_table_rows(table_window), heads], trial * 5 + 4, 0.5),
            table_window,
            heads,
            head_dim,
        };
        let grid = TokenGrid::new(random_tensor(&[window[0], window[1], window[2], c], trial + 1000, 1.0)).unwrap();
        let ws = window_partition(&grid, window);
        let got = ok(window_attention(&ws, &w, None))?;
        let v: usize = window.iter().product();
        let x = Tensor::new(vec![v, c], grid.tensor().data().to_vec());
        let want = dense_attention(&x, &w, window);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = got.data.data().iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(err);
        ensure(err < 1e-5, || format!("trial {trial}: window {window:?} relative error {err:e}"))?;
    }

    // Locality on a [2, 8, 8] grid with [2, 4, 4] windows.
    let (grid, c) = ([2, 8, 8], 8);
    let window = [2, 4, 4];
    let plain = BlockPlan::new(grid, window, [0, 0, 0], window, 2, 4);
    let shifted = BlockPlan::new(grid, window, [0, 2, 2], window, 2, 4);
    let (b1, b2) = (RandomBlock::new(c, 2, window, 1), RandomBlock::new(c, 2, window, 2));
    let x = random_tensor(&[2, 8, 8, c], 3, 1.0);
    let mut bumped = x.clone();
    bumped.data_mut()[0] += 0.5; // token (0, 0, 0), channel 0

    let base = run_blocks(&x, &[(&b1, &plain)]);
    let moved = run_blocks(&bumped, &[(&b1, &plain)]);
    ensure(token_changed(&base, &moved, grid, [1, 3, 3]), || "no influence inside the window".into())?;
    for at in [[0, 4, 0], [0, 0, 4], [1, 5, 5], [1, 7, 7]] {
        ensure(!token_changed(&base, &moved, grid, at), || format!("non-shifted block leaks into {at:?}"))?;
    }

    let base = run_blocks(&x, &[(&b1, &plain), (&b2, &shifted)]);
    let moved = run_blocks(&bumped, &[(&b1, &plain), (&b2, &shifted)]);
    ensure(token_changed(&base, &moved, grid, [0, 5, 5]), || "no adjacent-window influence after shift".into())?;

    // Wrapped pairs stay masked: (0,0) and (7,7) share a shifted window but not a region.
    let base = run_blocks(&x, &[(&b2, &shifted)]);
    let moved = run_blocks(&bumped, &[(&b2, &shifted)]);
    ensure(!token_changed(&base, &moved, grid, [0, 7, 7]), || "boundary mask lets a wrapped pair through".into())?;
    ensure(token_changed(&base, &moved, grid, [0, 1, 1]), || "no influence inside the shifted window".into())?;
    Ok(format!(
        "100 single-window trials, worst relative error {worst:.2e}; locality and shifted-window probes hold"
    ))
}

// ---------------------------------------------------------------- AC-3

fn masked_mse(model: &Model, cubes: &[TimeCube], masks: &[MaskSpec]) -> Result<f64, String> {
    let mut total = 0.0;
    for (cube, spec) in cubes.iter().zip(masks) {
        let recon = ok(model.reconstruct(cube, Some(spec)))?;
        total += ok(mae_loss(&recon, cube, spec, model.cfg.patch_size))?;
    }
    Ok(total / cubes.len() as f64)
}

fn fixed_masks(model: &Model, n: usize, seed: u64) -> Result<Vec<MaskSpec>, String> {
    let [t, gh, gw] = model.cfg.token_grid();
    (0..n).map(|i| ok(generate_window_mask(t, gh, gw, model.cfg.mask_ratio, seed + i as u64))).collect()
}

fn ac3() -> Check {
    let cubes: Vec<TimeCube> = (0..2)
        .map(|s| synth_generate(SynthKind::TexturedFields, [3, 64, 64, 6], 40 + s).unwrap().cube)
        .collect();
    let cfg = LoopConfig { batch_size: 2, ..LoopConfig::new(500, 2e-3, 11) };
    let run = || -> Result<(Model, Vec<f64>), String> {
        let mut m = ok(Model::new(tiny_config(3, 64, 64, 6), ModelKind::Mae, 5))?;
        let out = ok(pretrain(&mut m, &cubes, &cfg, Resume::default(), &mut |_, _| Ok(())))?;
        Ok((m, out.losses.iter().map(|r| r.loss).collect()))
    };
    let init = ok(Model::new(tiny_config(3, 64, 64, 6), ModelKind::Mae, 5))?;
    ensure(init.num_params() <= 200_000, || format!("{} parameters", init.num_params()))?;
    let masks = fixed_masks(&init, cubes.len(), 900)?;
    let before = masked_mse(&init, &cubes, &masks)?;
    let (m1, l1) = run()?;
    let after = masked_mse(&m1, &cubes, &masks)?;
    let (m2, l2) = run()?;
    let same = m1.params == m2.params && l1.iter().map(|v| v.to_bits()).eq(l2.iter().map(|v| v.to_bits()));
    ensure(same, || "repeat run differs".into())?;
    let ratio = after / before;
    let train_ratio = l1[l1.len() - 1] / l1[0];
    ensure(ratio < 0.1, || format!("held-mask MSE {before:.4e} -> {after:.4e} (ratio {ratio:.3})"))?;
    ensure(train_ratio < 0.1, || format!("training loss {:.4e} -> {:.4e} (ratio {train_ratio:.3})", l1[0], l1[l1.len() - 1]))?;
    Ok(format!(
        "{} params; masked MSE {before:.3e} -> {after:.3e} (x{ratio:.3}), step loss {:.3e} -> {:.3e}; repeat bitwise identical",
        init.num_params(),
        l1[0],
        l1[l1.len() - 1]
    ))
}

// ---------------------------------------------------------------- AC-4

fn ac4() -> Check {
    let dims = [3, 64, 64, 6];
    let train: Vec<TimeCube> = (0..8).map(|s| synth_generate(SynthKind::MovingCloud, dims, 100 + s).unwrap().cube).collect();
    let mut model = ok(Model::new(tiny_config(3, 64, 64, 6), ModelKind::Mae, 9))?;
    let cfg = LoopConfig { batch_size: 2, ..LoopConfig::new(800, 2e-3, 13) };
    ok(pretrain(&mut model, &train, &cfg, Resume::default(), &mut |_, _| Ok(())))?;

    let (mut model_err, mut base_err, mut count) = (0.0, 0.0, 0usize);
    let [_, ph, pw] = model.cfg.patch_size;
    for s in 0..4 {
        let chip = synth_generate(SynthKind::MovingCloud, dims, 200 + s).unwrap();
        let occ = ok(occlusion_map(&chip))?;
        let spec = ok(occlusion_mask(model.cfg.token_grid(), (ph, pw), dims[2], 0, &occ))?;
        let recon = ok(model.reconstruct(&chip.cube, Some(&spec)))?;
        let e = ok(infill_errors(&chip.cube, &recon, &occ))?;
        model_err += e.model * e.count as f64;
        base_err += e.baseline * e.count as f64;
        count += e.count;
    }
    let (model_err, base_err) = (model_err / count as f64, base_err / count as f64);
    let ratio = model_err / base_err;
    ensure(ratio < 0.5, || format!("model MSE {model_err:.3e} vs bilinear {base_err:.3e} (ratio {ratio:.3})"))?;
    Ok(format!(
        "occluded-pixel MSE {model_err:.3e} vs bilinear baseline {base_err:.3e} (ratio {ratio:.3}) over {count} values"
    ))
}

// ---------------------------------------------------------------- AC-5 / AC-6

const FT_DIMS: [usize; 4] = [3, 32, 32, 6];
const FT_STEPS: usize = 800;
const FT_EVAL_EVERY: usize = 10;
const FT_SEEDS: [u64; 3] = [1, 2, 3];
const MIOU_TARGET: f64 = 0.85;

struct Curve {
    /// `(completed steps, validation mIoU)`
    points: Vec<(usize, f64)>,
}

impl Curve {
    fn first_reaching(&self, target: f64) -> Option<usize> {
        self.points.iter().find(|(_, m)| *m >= target).map(|(s, _)| *s)
    }

    fn last(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }
}

struct Study {
    pretrained: Vec<Curve>,
    scratch: Vec<Curve>,
    no_skip: Vec<Curve>,
}

fn blob_samples(range: std::ops::Range<u64>) -> Vec<LabeledSample> {
    let task = satswin::config::Task::Segmentation { num_classes: 2 };
    range
        .map(|s| LabeledSample::from_chip(&synth_generate(SynthKind::TwoClassBlobs, FT_DIMS, s).unwrap(), &task).unwrap())
        .collect()
}

fn miou(model: &Model, val: &[LabeledSample]) -> satswin::Result<f64> {
    match evaluate(model, val)? {
        EvalReport::Segmentation(cm) => cm.miou(),
        EvalReport::Regression(_) => unreachable!("segmentation head"),
    }
}

fn finetune_curve(mut model: Model, train: &[LabeledSample], val: &[LabeledSample], seed: u64) -> satswin::Result<Curve> {
    let cfg = LoopConfig { batch_size: 4, ..LoopConfig::new(FT_STEPS, 2e-3, seed) };
    let mut points = vec![(0, miou(&model, val)?)];
    finetune(&mut model, train, &cfg, Resume::default(), &mut |r, m| {
        if (r.step + 1) % FT_EVAL_EVERY == 0 {
            points.push((r.step + 1, miou(m, val)?));
        }
        Ok(())
    })?;
    Ok(Curve { points })
}

fn study() -> &'static Result<Study, String> {
    static STUDY: OnceLock<Result<Study, String>> = OnceLock::new();
    STUDY.get_or_init(|| {
        let [t, h, w, b] = FT_DIMS;
        let cfg = tiny_config(t, h, w, b);
        let corpus: Vec<TimeCube> =
            (0..8).map(|s| synth_generate(SynthKind::TexturedFields, FT_DIMS, 500 + s).unwrap().cube).collect();
        let mut mae = ok(Model::new(cfg.clone(), ModelKind::Mae, 21))?;
        let pcfg = LoopConfig { batch_size: 4, ..LoopConfig::new(600, 2e-3, 22) };
        ok(pretrain(&mut mae, &corpus, &pcfg, Resume::default(), &mut |_, _| Ok(())))?;

        let train = blob_samples(1000..1064);
        let val = blob_samples(2000..2016);
        let head = HeadConfig::segmentation(2, 1, 8);
        let no_skip = HeadConfig { skip_connections: false, ..head.clone() };
        let mut s = Study { pretrained: vec![], scratch: vec![], no_skip: vec![] };
        for seed in FT_SEEDS {
            let (m, _) = ok(satswin::model::transfer_weights(&mae, &cfg, head.clone(), seed))?;
            s.pretrained.push(ok(finetune_curve(m, &train, &val, seed))?);
            let m = ok(Model::new(cfg.clone(), ModelKind::Unet { head: head.clone() }, seed))?;
            s.scratch.push(ok(finetune_curve(m, &train, &val, seed))?);
            let (m, _) = ok(satswin::model::transfer_weights(&mae, &cfg, no_skip.clone(), seed))?;
            s.no_skip.push(ok(finetune_curve(m, &train, &val, seed))?);
        }
        Ok(s)
    })
}

fn steps_str(s: Option<usize>) -> String {
    s.map_or_else(|| format!(">{FT_STEPS}"), |v| v.to_string())
}

fn ac5() -> Check {
    let s = study().as_ref().map_err(Clone::clone)?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for (i, seed) in FT_SEEDS.iter().enumerate() {
        let p = s.pretrained[i].first_reaching(MIOU_TARGET);
        let r = s.scratch[i].first_reaching(MIOU_TARGET);
        let win = match (p, r) {
            (Some(p), Some(r)) => p < r,
            (Some(_), None) => true,
            _ => false,
        };
        wins += win as usize;
        rows.push(format!(
            "seed {seed}: pretrained {} vs scratch {} (final {:.4} vs {:.4})",
            steps_str(p),
            steps_str(r),
            s.pretrained[i].last(),
            s.scratch[i].last()
        ));
    }
    let detail = format!("steps to mIoU {MIOU_TARGET}: {}", rows.join("; "));
    ensure(wins >= 2, || format!("{wins}/3 seeds favour pretraining; {detail}"))?;
    Ok(format!("{wins}/3 seeds favour pretraining; {detail}"))
}

fn ac6() -> Check {
    let s = study().as_ref().map_err(Clone::clone)?;
    let rows: Vec<String> = FT_SEEDS
        .iter()
        .enumerate()
        .map(|(i, seed)| format!("seed {seed}: skip {:.4} vs no-skip {:.4}", s.pretrained[i].last(), s.no_skip[i].last()))
        .collect();
    let all = (0..FT_SEEDS.len()).all(|i| s.pretrained[i].last() >= s.no_skip[i].last());
    ensure(all, || format!("skip below no-skip in some seed; {}", rows.join("; ")))?;
    Ok(format!("final mIoU after {FT_STEPS} steps: {}", rows.join("; ")))
}

// ---------------------------------------------------------------- AC-7

fn micro_config() -> ModelConfig {
    ModelConfig {
        patch_size: [1, 2, 2],
        embed_dim: 8,
        stage_depths: vec![2, 1],
        stage_heads: vec![1, 2],
        window: [2, 2, 2],
        head_dim: 8,
        mlp_ratio: 1.0,
        mask_ratio: 0.5,
        num_bands: 2,
        num_timesteps: 2,
        input_height: 8,
        input_width: 8,
        decoder_depths: vec![1],
        merge_norm: true,
        mask_mode: MaskMode::Random,
    }
}

/// Every parameter drawn at a scale where all nonlinearities are exercised.
fn perturbed(model: &Model) -> (Vec<String>, Vec<Tensor>) {
    model
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let r = random_tensor(t.shape(), 77 + i as u64, 0.4);
            let is_gain = name.contains("norm") && name.ends_with("weight");
            (name.to_owned(), if is_gain { r.map(|v| 1.0 + v) } else { r })
        })
        .unzip()
}

fn gradcheck_model(
    model: &Model,
    loss: impl Fn(&Model, &mut Tape, &Bound) -> Var,
) -> Result<(usize, f64, usize), String> {
    let (names, tensors) = perturbed(model);
    let report = check_gradients(
        &tensors,
        |tape, vars| {
            let p: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            loss(model, tape, &p)
        },
        1e-5,
    );
    let (pi, ei) = report.worst;
    ensure(report.max_rel_error < 1e-3, || {
        format!(
            "`{}`[{ei}]: analytic {:e} vs numeric {:e} (rel {:.2e})",
            names[pi], report.analytic_at_worst, report.numeric_at_worst, report.max_rel_error
        )
    })?;
    Ok((model.num_params(), report.max_rel_error, report.checked))
}

fn ac7() -> Check {
    let cfg = micro_config();
    let cube = random_cube(cfg.input_shape(), 3);
    let [t, gh, gw] = cfg.token_grid();
    let spec = ok(generate_window_mask(t, gh, gw, 0.5, 4))?;
    let x = cube.to_tensor();

    let mae = ok(Model::new(cfg.clone(), ModelKind::Mae, 1))?;
    let mae_check = gradcheck_model(&mae, |m, tape, p| {
        let xv = tape.constant(x.clone());
        let y = m.mae_graph(tape, p, xv, Some(&spec)).unwrap();
        mae_loss_var(tape, y, &cube, &spec, m.cfg.patch_size, LossSupport::Masked).unwrap()
    })?;

    let seg = HeadConfig::segmentation(3, 1, 4);
    let unet = ok(Model::new(cfg.clone(), ModelKind::Unet { head: seg }, 1))?;
    let mut rng = stream_rng(5, 0xA7, 0);
    let labels: Vec<usize> = (0..64).map(|i| if i == 5 { 255 } else { rng.random_range(0..3) }).collect();
    let seg_target = Target::Classes(labels);
    let seg_check = gradcheck_model(&unet, |m, tape, p| {
        let xv = tape.constant(x.clone());
        let y = m.unet_graph(tape, p, xv).unwrap();
        task_loss(tape, y, &seg_target, &[1.0, 2.0, 0.5]).unwrap()
    })?;

    let reg = HeadConfig { head_order: HeadOrder::ModulateThenExpand, ..HeadConfig::regression(1, 4) };
    let reg_model = ok(Model::new(cfg, ModelKind::Unet { head: reg }, 1))?;
    let density = Target::Density((0..64).map(|i| i as f64 * 1.5).collect());
    let reg_check = gradcheck_model(&reg_model, |m, tape, p| {
        let xv = tape.constant(x.clone());
        let y = m.unet_graph(tape, p, xv).unwrap();
        task_loss(tape, y, &density, &[]).unwrap()
    })?;

    let worst = mae_check.1.max(seg_check.1).max(reg_check.1);
    ensure(unet.num_params() <= 5000 && mae.num_params() <= 5000, || "micro model over 5k parameters".into())?;
    Ok(format!(
        "MAE ({} params), segmentation U-Net with skips ({}), regression modulate-first ({}): {} entries, worst rel error {worst:.2e}",
        mae_check.0,
        seg_check.0,
        reg_check.0,
        mae_check.2 + seg_check.2 + reg_check.2
    ))
}

// ---------------------------------------------------------------- AC-8

fn ac8() -> Check {
    let cm = ok(ConfusionMatrix::from_counts(&[vec![3, 1], vec![2, 4]]))?;
    let exact = ok(cm.iou(0))? == Some(0.5)
        && ok(cm.iou(1))? == Some(4.0 / 7.0)
        && ok(cm.miou())? == (0.5 + 4.0 / 7.0) / 2.0
        && ok(cm.macc())? == (0.75 + 4.0 / 6.0) / 2.0
        && ok(cm.overall_acc())? == 0.7;
    ensure(exact, || format!("hand case mismatch: {:?}", cm.summary()))?;

    let mut rng = stream_rng(8, 0xA8, 0);
    for map in 0..20 {
        let k = rng.random_range(2..=5usize);
        let n = rng.random_range(50..400usize);
        let truth: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.05) { 255 } else { rng.random_range(0..k) }).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if t != 255 && rng.random_bool(0.6) { t } else { rng.random_range(0..k) })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        ok(cm.accumulate(&pred, &truth, Some(255)))?;

        let scored: Vec<(usize, usize)> = pred.iter().zip(&truth).filter(|(_, t)| **t != 255).map(|(p, t)| (*p, *t)).collect();
        let (mut ious, mut accs) = (Vec::new(), Vec::new());
        for c in 0..k {
            let inter = scored.iter().filter(|(p, t)| *p == c && *t == c).count();
            let union = scored.iter().filter(|(p, t)| *p == c || *t == c).count();
            let support = scored.iter().filter(|(_, t)| *t == c).count();
            if support > 0 {
                ious.push(inter as f64 / union as f64);
                accs.push(inter as f64 / support as f64);
            }
            let got = ok(cm.iou(c))?;
            let want = (union > 0).then(|| inter as f64 / union as f64);
            ensure(got == want, || format!("map {map} class {c}: iou {got:?} vs {want:?}"))?;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let correct = scored.iter().filter(|(p, t)| p == t).count() as f64 / scored.len() as f64;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        ensure(close(ok(cm.miou())?, mean(&ious)), || format!("map {map}: mIoU"))?;
        ensure(close(ok(cm.macc())?, mean(&accs)), || format!("map {map}: mAcc"))?;
        ensure(close(ok(cm.overall_acc())?, correct), || format!("map {map}: overall accuracy"))?;
    }
    Ok("hand case [[3,1],[2,4]] exact; 20 random maps match the per-pixel reference".into())
}

// ---------------------------------------------------------------- AC-9

fn ac9() -> Check {
    let mut rng = stream_rng(9, 0xA9, 0);
    for _ in 0..200 {
        let (t, gh, gw) = (rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=16));
        let ratio = rng.random_range(0.01..0.99);
        let spec = ok(generate_window_mask(t, gh, gw, ratio, rng.random()))?;
        let want = (ratio * (gh * gw) as f64).round() as usize;
        for s in 0..t {
            ensure(spec.slice_count(s) == want, || {
                format!("slice {s} of {t}x{gh}x{gw} at ratio {ratio}: {} masked, expected {want}", spec.slice_count(s))
            })?;
        }
    }

    let cfg = tiny_config(2, 16, 16, 3);
    let model = ok(Model::new(cfg.clone(), ModelKind::Mae, 4))?;
    let cube = random_cube(cfg.input_shape(), 5);
    let none = MaskSpec::none(cfg.token_grid());
    let a = ok(model.reconstruct(&cube, Some(&none)))?;
    let b = ok(model.reconstruct(&cube, None))?;
    ensure(a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())), || {
        "all-false mask differs from the unmasked pass".into()
    })?;

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &BTreeSet::new());
    let x = tape.constant(cube.to_tensor());
    let y = ok(model.mae_graph(&mut tape, &p, x, Some(&none)))?;
    let loss = ok(mae_loss_var(&mut tape, y, &cube, &none, cfg.patch_size, LossSupport::All))?;
    let grads = tape.backward(loss);
    let token = ok(p.get("encoder.mask_token"))?;
    let zero = grads.get(token).is_none_or(|g| g.data().iter().all(|v| *v == 0.0));
    ensure(zero, || "mask token receives gradient under an all-false mask".into())?;
    Ok("200 masks with exact per-slice counts; all-false mask bitwise equal to unmasked; mask-token gradient zero".into())
}

// ---------------------------------------------------------------- AC-10

fn ac10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cube = random_cube([3, 9, 7, 4], 6);
    let mut chip = Chip::new(cube.clone());
    chip.labels = Some(LabelBlock { timesteps: 1, data: LabelData::U16((0..63).map(|v| v * 7).collect()) });
    let path = dir.path().join("a.sswc");
    ok(write_chip(&path, &chip, Dtype::F32))?;
    let back = ok(read_chip(&path))?;
    let bits = |c: &TimeCube| c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&back.cube) == bits(&cube) && back.labels == chip.labels && back.band_names == chip.band_names, || {
        "f32 chip round trip not bit-exact".into()
    })?;
    ok(write_chip(&path, &chip, Dtype::U8))?;
    let q = ok(read_chip(&path))?;
    ok(write_chip(&path, &q, Dtype::U8))?;
    let q2 = ok(read_chip(&path))?;
    ensure(bits(&q.cube) == bits(&q2.cube), || "u8 chip round trip not exact after quantization".into())?;
    let max_q = q.cube.data().iter().zip(cube.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    ensure(max_q <= 0.5 / 255.0 + 1e-6, || format!("u8 quantization error {max_q}"))?;

    let cfg = tiny_config(2, 16, 16, 4);
    let input = random_cube(cfg.input_shape(), 8);
    let spec = ok(generate_window_mask(2, 4, 4, 0.75, 1))?;
    let mae = ok(Model::new(cfg.clone(), ModelKind::Mae, 2))?;
    let ck = dir.path().join("m.ckpt");
    ok(Checkpoint::new(mae.clone()).save(&ck))?;
    let loaded = ok(Checkpoint::load(&ck))?.model;
    let (r1, r2) = (ok(mae.reconstruct(&input, Some(&spec)))?, ok(loaded.reconstruct(&input, Some(&spec)))?);
    ensure(bits(&r1) == bits(&r2), || "MAE checkpoint changes the forward pass".into())?;
    let unet = ok(Model::new(cfg.clone(), ModelKind::Unet { head: HeadConfig::regression(1, 4) }, 2))?;
    ok(Checkpoint::new(unet.clone()).save(&ck))?;
    let loaded = ok(Checkpoint::load(&ck))?.model;
    let (u1, u2) = (ok(unet.unet_forward(&input))?, ok(loaded.unet_forward(&input))?);
    ensure(u1.data().iter().map(|v| v.to_bits()).eq(u2.data().iter().map(|v| v.to_bits())), || {
        "U-Net checkpoint changes the forward pass".into()
    })?;

    for c in [cfg, ModelConfig::swin_base(3, 224, 224, 6), micro_config()] {
        let text = c.to_json();
        let again = ok(ModelConfig::from_json(&text))?;
        ensure(again == c && again.to_json() == text, || "config JSON round trip unstable".into())?;
    }
    Ok("SSWC f32 bit-exact and u8 stable; checkpoints reproduce MAE and U-Net outputs bitwise; config JSON stable".into())
}

// ---------------------------------------------------------------- driver

struct Criterion {
    id: &'static str,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: "AC-1", name: "shape conformance", limit: Duration::from_secs(120), run: ac1 },
        Criterion { id: "AC-2", name: "attention oracle", limit: Duration::from_secs(120), run: ac2 },
        Criterion { id: "AC-3", name: "overfit sanity", limit: Duration::from_secs(600), run: ac3 },
        Criterion { id: "AC-4", name: "temporal infill", limit: Duration::from_secs(900), run: ac4 },
        Criterion { id: "AC-5", name: "transfer benefit", limit: Duration::from_secs(1200), run: ac5 },
        Criterion { id: "AC-6", name: "skip ablation", limit: Duration::from_secs(1200), run: ac6 },
        Criterion { id: "AC-7", name: "gradient correctness", limit: Duration::from_secs(300), run: ac7 },
        Criterion { id: "AC-8", name: "metric oracle", limit: Duration::from_secs(60), run: ac8 },
        Criterion { id: "AC-9", name: "mask invariants", limit: Duration::from_secs(60), run: ac9 },
        Criterion { id: "AC-10", name: "format round trips", limit: Duration::from_secs(60), run: ac10 },
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut ran, mut failed) = (0, 0);
    // AC-5 and AC-6 share one study; its cost is charged to whichever runs first.
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| w == c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded time limit")),
            Err(e) => (false, e),
        };
        ran += 1;
        failed += !pass as usize;
        println!(
            "{} {} {}: {} [{:.1}s, limit {}s]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    let strict = std::env::var("SATSWIN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
