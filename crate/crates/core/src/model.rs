//! Encoder, MAE decoder, and the skip-connected finetuning network.
//!
//! Parameter names are stable dot paths, e.g.
//! `encoder.stage0.block1.attn.qkv.weight`. Linear weights are stored
//! `[in, out]`.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{bias_table_rows, swin_block, AttentionParams, BlockParams, BlockPlan};
use crate::autograd::{Tape, Var};
use crate::config::{check_config, stage_window, HeadConfig, HeadOrder, ModelConfig, ShapePipeline, Task};
use crate::error::{Error, Result};
use crate::masking::apply_mask_var;
use crate::params::{init_tensor, Bound, Init, ParamStore, INIT_STD};
use crate::patching::{final_patch_expand, linear_embed, patch_expand, patch_merge, patch_partition, patch_unpartition};
use crate::tensor::Tensor;
use crate::types::{MaskSpec, StageFeatures, TimeCube, TokenGrid};

/// Upper bound of the regression target range.
pub const DENSITY_MAX: f64 = 100.0;

/// Which network the parameters describe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// Encoder + reconstruction decoder with a mask token.
    Mae,
    /// Encoder + decoder with skip fusion, temporal modulator, and task head.
    Unet { head: HeadConfig },
}

/// Name, shape, and initializer of every parameter of a network.
pub fn param_spec(cfg: &ModelConfig, kind: &ModelKind) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let tn = Init::TruncNormal(INIT_STD);
    let c = cfg.embed_dim;
    let [pt, ph, pw] = cfg.patch_size;
    let patch_in = pt * ph * pw * cfg.num_bands;
    let table = bias_table_rows(cfg.window);

    let block = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, width: usize, heads: usize| {
        let hidden = cfg.mlp_hidden(width);
        for (n, shape, init) in [
            ("norm1.weight", vec![width], Init::Ones),
            ("norm1.bias", vec![width], Init::Zeros),
            ("attn.qkv.weight", vec![width, 3 * width], tn),
            ("attn.qkv.bias", vec![3 * width], Init::Zeros),
            ("attn.proj.weight", vec![width, width], tn),
            ("attn.proj.bias", vec![width], Init::Zeros),
            ("attn.rel_bias", vec![table, heads], tn),
            ("norm2.weight", vec![width], Init::Ones),
            ("norm2.bias", vec![width], Init::Zeros),
            ("mlp.fc1.weight", vec![width, hidden], tn),
            ("mlp.fc1.bias", vec![hidden], Init::Zeros),
            ("mlp.fc2.weight", vec![hidden, width], tn),
            ("mlp.fc2.bias", vec![width], Init::Zeros),
        ] {
            push(format!("{prefix}.{n}"), shape, init);
        }
    };

    push("encoder.patch_embed.weight".into(), vec![patch_in, c], tn);
    push("encoder.patch_embed.bias".into(), vec![c], Init::Zeros);
    if *kind == ModelKind::Mae {
        push("encoder.mask_token".into(), vec![c], tn);
    }
    let stages = cfg.num_stages();
    for i in 0..stages {
        let width = cfg.stage_width(i);
        for j in 0..cfg.stage_depths[i] {
            block(&mut push, &format!("encoder.stage{i}.block{j}"), width, cfg.stage_heads[i]);
        }
        if i + 1 < stages {
            if cfg.merge_norm {
                push(format!("encoder.stage{i}.merge.norm.weight"), vec![4 * width], Init::Ones);
                push(format!("encoder.stage{i}.merge.norm.bias"), vec![4 * width], Init::Zeros);
            }
            push(format!("encoder.stage{i}.merge.proj.weight"), vec![4 * width, 2 * width], tn);
        }
    }
    let skips = matches!(kind, ModelKind::Unet { head } if head.skip_connections);
    for level in 0..stages.saturating_sub(1) {
        let j = stages - 2 - level;
        let width = cfg.stage_width(j);
        push(
            format!("decoder.level{level}.expand.proj.weight"),
            vec![2 * width, 4 * width],
            tn,
        );
        if skips {
            push(format!("decoder.level{level}.fuse.weight"), vec![2 * width, width], tn);
            push(format!("decoder.level{level}.fuse.bias"), vec![width], Init::Zeros);
        }
        for m in 0..cfg.decoder_depths[level] {
            block(&mut push, &format!("decoder.level{level}.block{m}"), width, cfg.stage_heads[j]);
        }
    }
    push("decoder.norm.weight".into(), vec![c], Init::Ones);
    push("decoder.norm.bias".into(), vec![c], Init::Zeros);
    match kind {
        ModelKind::Mae => {
            push("mae_head.weight".into(), vec![c, patch_in], tn);
            push("mae_head.bias".into(), vec![patch_in], Init::Zeros);
        }
        ModelKind::Unet { head } => {
            let ch = head.head_channels;
            let k = head.temporal_geometry(cfg.token_grid()[0]).map(|g| g.0).unwrap_or(1);
            let tm_width = match head.head_order {
                HeadOrder::ExpandThenModulate => ch,
                HeadOrder::ModulateThenExpand => c,
            };
            push("head.expand.weight".into(), vec![c, ph * pw * ch], tn);
            push("head.temporal.weight".into(), vec![k, tm_width], tn);
            push("head.temporal.bias".into(), vec![tm_width], Init::Zeros);
            let k_out = head.task.output_channels();
            push("head.out.weight".into(), vec![ch, k_out], tn);
            push("head.out.bias".into(), vec![k_out], Init::Zeros);
        }
    }
    out
}

/// Window plans for each resolution: `[unshifted, shifted]`.
fn build_plans(cfg: &ModelConfig) -> Vec<[BlockPlan; 2]> {
    let [t, gh, gw] = cfg.token_grid();
    (0..cfg.num_stages())
        .map(|i| {
            let grid = [t, gh >> i, gw >> i];
            let (eff, shift) = stage_window(cfg.window, grid);
            let plan = |s| BlockPlan::new(grid, eff, s, cfg.window, cfg.stage_heads[i], cfg.head_dim);
            [plan([0, 0, 0]), plan(shift)]
        })
        .collect()
}

fn block_params(p: &Bound, prefix: &str) -> Result<BlockParams> {
    let g = |n: &str| p.get(&format!("{prefix}.{n}"));
    Ok(BlockParams {
        norm1: (g("norm1.weight")?, g("norm1.bias")?),
        attn: AttentionParams {
            qkv_w: g("attn.qkv.weight")?,
            qkv_b: g("attn.qkv.bias")?,
            proj_w: g("attn.proj.weight")?,
            proj_b: g("attn.proj.bias")?,
            table: g("attn.rel_bias")?,
        },
        norm2: (g("norm2.weight")?, g("norm2.bias")?),
        fc1: (g("mlp.fc1.weight")?, g("mlp.fc1.bias")?),
        fc2: (g("mlp.fc2.weight")?, g("mlp.fc2.bias")?),
    })
}

/// Intermediate decoder activations, for layerwise comparisons.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    /// Output of each level's patch expansion, before any fusion.
    pub expanded: Vec<Var>,
}

/// A network with its configuration and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub kind: ModelKind,
    pub params: ParamStore,
    plans: Arc<Vec<[BlockPlan; 2]>>,
}

impl Model {
    /// Freshly initialized network.
    pub fn new(cfg: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, shape, init) in param_spec(&cfg, &kind) {
            let t = init_tensor(&name, &shape, init, seed);
            params.insert(name, t);
        }
        Self::from_params(cfg, kind, params)
    }

    /// Validates `params` against the names and shapes the config implies.
    pub fn from_params(cfg: ModelConfig, kind: ModelKind, params: ParamStore) -> Result<Self> {
        check_config(&cfg)?;
        if let ModelKind::Unet { head } = &kind {
            check_head(&cfg, head)?;
        }
        let spec = param_spec(&cfg, &kind);
        let mut problems = Vec::new();
        for (name, shape, _) in &spec {
            match params.get(name) {
                None => problems.push(format!("missing `{name}`")),
                Some(t) if t.shape() != &shape[..] => {
                    problems.push(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))
                }
                Some(_) => {}
            }
        }
        let expected: BTreeSet<&str> = spec.iter().map(|(n, _, _)| n.as_str()).collect();
        for name in params.names() {
            if !expected.contains(name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Incompatible(problems));
        }
        let plans = Arc::new(build_plans(&cfg));
        Ok(Self {
            cfg,
            kind,
            params,
            plans,
        })
    }

    pub fn head(&self) -> Option<&HeadConfig> {
        match &self.kind {
            ModelKind::Unet { head } => Some(head),
            ModelKind::Mae => None,
        }
    }

    pub fn pipeline(&self) -> ShapePipeline {
        ShapePipeline::new(&self.cfg)
    }

    /// Output shape of a forward pass on a config-sized cube.
    pub fn output_shape(&self) -> [usize; 4] {
        let p = self.pipeline();
        match &self.kind {
            ModelKind::Mae => p.reconstruction,
            ModelKind::Unet { head } => p.unet_output(head),
        }
    }

    /// Attention plans per stage, for allocation bookkeeping.
    pub fn plans(&self) -> &[[BlockPlan; 2]] {
        &self.plans
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records all parameters on a tape; names under a `frozen` prefix become constants.
    pub fn bind(&self, tape: &mut Tape, frozen: &BTreeSet<String>) -> Bound {
        self.params.bind(tape, frozen)
    }

    fn check_cube(&self, shape: &[usize]) -> Result<()> {
        let expected = self.cfg.input_shape();
        if shape != expected {
            return Err(Error::Shape(format!("cube {shape:?}, model expects {expected:?}")));
        }
        Ok(())
    }

    fn blocks(&self, tape: &mut Tape, p: &Bound, mut x: Var, prefix: &str, depth: usize, stage: usize) -> Result<Var> {
        for j in 0..depth {
            let bp = block_params(p, &format!("{prefix}.block{j}"))?;
            x = swin_block(tape, x, &bp, &self.plans[stage][j % 2])?;
        }
        Ok(x)
    }

    /// Partition → embed → optional mask substitution → stages. Returns the
    /// bottleneck and each stage's pre-merge output, finest first.
    pub fn encode_graph(&self, tape: &mut Tape, p: &Bound, cube: Var, mask: Option<&MaskSpec>) -> Result<(Var, Vec<Var>)> {
        self.check_cube(tape.value(cube).shape())?;
        let tokens = patch_partition(tape, cube, self.cfg.patch_size)?;
        let mut x = linear_embed(tape, tokens, p.get("encoder.patch_embed.weight")?, p.get("encoder.patch_embed.bias")?)?;
        if let Some(spec) = mask {
            let token = p
                .get("encoder.mask_token")
                .map_err(|_| Error::Invalid("this network has no mask token; masking is pretraining-only".into()))?;
            x = apply_mask_var(tape, x, spec, token)?;
        }
        let stages = self.cfg.num_stages();
        let mut skips = Vec::with_capacity(stages);
        for i in 0..stages {
            x = self.blocks(tape, p, x, &format!("encoder.stage{i}"), self.cfg.stage_depths[i], i)?;
            skips.push(x);
            if i + 1 < stages {
                let norm = if self.cfg.merge_norm {
                    Some((
                        p.get(&format!("encoder.stage{i}.merge.norm.weight"))?,
                        p.get(&format!("encoder.stage{i}.merge.norm.bias"))?,
                    ))
                } else {
                    None
                };
                x = patch_merge(tape, x, norm, p.get(&format!("encoder.stage{i}.merge.proj.weight"))?)?;
            }
        }
        Ok((x, skips))
    }

    /// Mirrored decoder up to the finest token resolution, then a final norm.
    /// With `skips`, each level fuses `concat(skip, decoder)` through a projection.
    pub fn decode_graph(&self, tape: &mut Tape, p: &Bound, bottleneck: Var, skips: Option<&[Var]>) -> Result<(Var, DecoderTrace)> {
        let stages = self.cfg.num_stages();
        let mut x = bottleneck;
        let mut trace = DecoderTrace::default();
        for level in 0..stages.saturating_sub(1) {
            let j = stages - 2 - level;
            let prefix = format!("decoder.level{level}");
            x = patch_expand(tape, x, p.get(&format!("{prefix}.expand.proj.weight"))?)?;
            trace.expanded.push(x);
            if let Some(skips) = skips {
                let cat = tape.concat(skips[j], x);
                x = tape.linear(cat, p.get(&format!("{prefix}.fuse.weight"))?, Some(p.get(&format!("{prefix}.fuse.bias"))?));
            }
            x = self.blocks(tape, p, x, &prefix, self.cfg.decoder_depths[level], j)?;
        }
        let y = tape.layer_norm(x, p.get("decoder.norm.weight")?, p.get("decoder.norm.bias")?);
        Ok((y, trace))
    }

    /// Tokenwise projection to patch pixels, then inverse partition.
    pub fn mae_head_graph(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let y = tape.linear(features, p.get("mae_head.weight")?, Some(p.get("mae_head.bias")?));
        patch_unpartition(tape, y, self.cfg.input_shape(), self.cfg.patch_size)
    }

    /// Full pretraining forward pass: reconstruction of the input cube.
    pub fn mae_graph(&self, tape: &mut Tape, p: &Bound, cube: Var, mask: Option<&MaskSpec>) -> Result<Var> {
        let (bottleneck, _) = self.encode_graph(tape, p, cube, mask)?;
        let (features, _) = self.decode_graph(tape, p, bottleneck, None)?;
        self.mae_head_graph(tape, p, features)
    }

    /// Final expansion, temporal modulator, and task head.
    pub fn unet_head_graph(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let head = self.head().ok_or_else(|| Error::Invalid("not a finetuning network".into()))?;
        let t_in = tape.value(features).shape()[0];
        let (_, stride) = head.temporal_geometry(t_in)?;
        let (ph, pw) = (self.cfg.patch_size[1], self.cfg.patch_size[2]);
        let (tw, tb) = (p.get("head.temporal.weight")?, p.get("head.temporal.bias")?);
        let expand = p.get("head.expand.weight")?;
        let x = match head.head_order {
            HeadOrder::ExpandThenModulate => {
                let x = final_patch_expand(tape, features, expand, (ph, pw))?;
                tape.temporal_conv(x, tw, tb, stride, head.t_out)
            }
            HeadOrder::ModulateThenExpand => {
                let x = tape.temporal_conv(features, tw, tb, stride, head.t_out);
                final_patch_expand(tape, x, expand, (ph, pw))?
            }
        };
        let x = tape.gelu(x);
        Ok(tape.linear(x, p.get("head.out.weight")?, Some(p.get("head.out.bias")?)))
    }

    /// Full finetuning forward pass: `[T_out, H, W, K]` logits (segmentation)
    /// or unclamped density / 100 (regression).
    pub fn unet_graph(&self, tape: &mut Tape, p: &Bound, cube: Var) -> Result<Var> {
        let head = self.head().ok_or_else(|| Error::Invalid("not a finetuning network".into()))?;
        let (bottleneck, skips) = self.encode_graph(tape, p, cube, None)?;
        let skips = head.skip_connections.then_some(&skips[..]);
        let (features, _) = self.decode_graph(tape, p, bottleneck, skips)?;
        self.unet_head_graph(tape, p, features)
    }

    fn inference<T>(&self, f: impl FnOnce(&mut Tape, &Bound) -> Result<T>) -> Result<T> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape, &BTreeSet::new());
        f(&mut tape, &p)
    }

    /// Bottleneck and per-stage features for one cube.
    pub fn encode(&self, cube: &TimeCube, mask: Option<&MaskSpec>) -> Result<(TokenGrid, StageFeatures)> {
        self.inference(|tape, p| {
            let x = tape.constant(cube.to_tensor());
            let (b, skips) = self.encode_graph(tape, p, x, mask)?;
            let features = skips
                .iter()
                .map(|v| TokenGrid::new(tape.value(*v).clone()))
                .collect::<Result<Vec<_>>>()?;
            Ok((TokenGrid::new(tape.value(b).clone())?, StageFeatures { features }))
        })
    }

    /// Decoder and reconstruction head applied to a bottleneck grid.
    pub fn decode_mae(&self, bottleneck: &TokenGrid) -> Result<TimeCube> {
        if self.kind != ModelKind::Mae {
            return Err(Error::Invalid("decode_mae needs a pretraining network".into()));
        }
        let expected = self.pipeline().bottleneck;
        if bottleneck.dims() != expected {
            return Err(Error::Shape(format!("bottleneck {:?}, expected {expected:?}", bottleneck.dims())));
        }
        self.inference(|tape, p| {
            let b = tape.constant(bottleneck.tensor().clone());
            let (features, _) = self.decode_graph(tape, p, b, None)?;
            let y = self.mae_head_graph(tape, p, features)?;
            TimeCube::from_tensor(tape.value(y))
        })
    }

    /// Masked reconstruction of one cube.
    pub fn reconstruct(&self, cube: &TimeCube, mask: Option<&MaskSpec>) -> Result<TimeCube> {
        self.inference(|tape, p| {
            let x = tape.constant(cube.to_tensor());
            let y = self.mae_graph(tape, p, x, mask)?;
            TimeCube::from_tensor(tape.value(y))
        })
    }

    /// Raw finetuning output for one cube.
    pub fn unet_forward(&self, cube: &TimeCube) -> Result<Tensor> {
        self.inference(|tape, p| {
            let x = tape.constant(cube.to_tensor());
            let y = self.unet_graph(tape, p, x)?;
            Ok(tape.value(y).clone())
        })
    }

    /// Task prediction: per-pixel class ids, or densities clamped to `[0, 100]`.
    pub fn predict(&self, cube: &TimeCube) -> Result<Prediction> {
        let head = self.head().ok_or_else(|| Error::Invalid("not a finetuning network".into()))?;
        let out = self.unet_forward(cube)?;
        Ok(match head.task {
            Task::Segmentation { num_classes } => Prediction::Classes(argmax_rows(out.data(), num_classes)),
            Task::Regression => Prediction::Density(out.data().iter().map(|v| (v * DENSITY_MAX).clamp(0.0, DENSITY_MAX)).collect()),
        })
    }
}

/// Per-pixel output of a finetuned network, row-major `[T_out, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Classes(Vec<usize>),
    Density(Vec<f64>),
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(data: &[f64], width: usize) -> Vec<usize> {
    data.chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn check_head(cfg: &ModelConfig, head: &HeadConfig) -> Result<()> {
    head.temporal_geometry(cfg.token_grid()[0])?;
    if head.head_channels == 0 {
        return Err(Error::Invalid("head_channels must be positive".into()));
    }
    if let Task::Segmentation { num_classes } = head.task {
        if num_classes < 2 {
            return Err(Error::Invalid(format!("segmentation needs at least 2 classes, got {num_classes}")));
        }
    }
    Ok(())
}

/// Which parameter groups a transfer copied, initialized, or discarded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    pub dropped: Vec<String>,
    pub copied_scalars: usize,
}

fn is_trunk(name: &str) -> bool {
    (name.starts_with("encoder.") || name.starts_with("decoder.")) && !name.contains(".fuse.")
}

/// Scalars in the pretrained encoder and decoder (everything but the
/// reconstruction head).
pub fn trunk_scalars(params: &ParamStore) -> usize {
    params.iter().filter(|(n, _)| n.starts_with("encoder.") || n.starts_with("decoder.")).map(|(_, t)| t.len()).sum()
}

/// Builds a finetuning network from pretrained weights: encoder and decoder
/// blocks copied, mask token and reconstruction head dropped, fusion and
/// head layers freshly initialized from `seed`.
pub fn transfer_weights(pretrained: &Model, cfg: &ModelConfig, head: HeadConfig, seed: u64) -> Result<(Model, TransferReport)> {
    let src = &pretrained.cfg;
    let mut problems = Vec::new();
    let same = |a: String, b: String, what: &str, problems: &mut Vec<String>| {
        if a != b {
            problems.push(format!("{what}: pretrained {a}, target {b}"));
        }
    };
    if src.num_stages() != cfg.num_stages() {
        same(src.num_stages().to_string(), cfg.num_stages().to_string(), "stage count", &mut problems);
    }
    for i in 0..src.num_stages().min(cfg.num_stages()) {
        same(src.stage_depths[i].to_string(), cfg.stage_depths[i].to_string(), &format!("encoder.stage{i} depth"), &mut problems);
        same(src.stage_heads[i].to_string(), cfg.stage_heads[i].to_string(), &format!("encoder.stage{i} heads"), &mut problems);
    }
    for l in 0..src.decoder_depths.len().min(cfg.decoder_depths.len()) {
        same(src.decoder_depths[l].to_string(), cfg.decoder_depths[l].to_string(), &format!("decoder.level{l} depth"), &mut problems);
    }
    same(src.embed_dim.to_string(), cfg.embed_dim.to_string(), "embed_dim", &mut problems);
    same(format!("{:?}", src.patch_size), format!("{:?}", cfg.patch_size), "patch_size", &mut problems);
    same(src.num_bands.to_string(), cfg.num_bands.to_string(), "num_bands", &mut problems);
    same(src.head_dim.to_string(), cfg.head_dim.to_string(), "head_dim", &mut problems);
    same(src.mlp_ratio.to_string(), cfg.mlp_ratio.to_string(), "mlp_ratio", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Incompatible(problems));
    }

    let kind = ModelKind::Unet { head };
    let mut model = Model::new(cfg.clone(), kind, seed)?;
    let mut report = TransferReport::default();
    let mut mismatched = Vec::new();
    let targets: Vec<String> = model.params.names().map(str::to_owned).collect();
    for name in targets {
        if !is_trunk(&name) {
            report.fresh.push(name);
            continue;
        }
        match pretrained.params.get(&name) {
            Some(t) if t.shape() == model.params.get(&name).unwrap().shape() => {
                report.copied_scalars += t.len();
                model.params.insert(name.clone(), t.clone());
                report.copied.push(name);
            }
            Some(t) => mismatched.push(format!(
                "`{name}`: pretrained {:?}, target {:?}",
                t.shape(),
                model.params.get(&name).unwrap().shape()
            )),
            None => mismatched.push(format!("`{name}` missing from pretrained weights")),
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Incompatible(mismatched));
    }
    report.dropped = pretrained.params.names().filter(|n| !model.params.contains(n)).map(str::to_owned).collect();
    Ok((model, report))
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn tiny(t: usize, h: usize, w: usize, b: usize) -> ModelConfig {
        ModelConfig {
            patch_size: [1, 4, 4],
            embed_dim: 32,
            stage_depths: vec![1, 1],
            stage_heads: vec![1, 2],
            window: [t, 2, 2],
            head_dim: 32,
            mlp_ratio: 2.0,
            mask_ratio: 0.75,
            num_bands: b,
            num_timesteps: t,
            input_height: h,
            input_width: w,
            decoder_depths: vec![1],
            merge_norm: true,
            mask_mode: Default::default(),
        }
    }

}

#[cfg(test)]
mod tests {
    use super::tests_support::tiny;
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::masking::generate_window_mask;

    fn cube(shape: [usize; 4], seed: u64) -> TimeCube {
        let t = random_tensor(&shape, seed, 0.5).map(|v| v + 0.5);
        TimeCube::from_tensor(&t).unwrap()
    }

    #[test]
    fn tiny_encode_shapes() {
        let m = Model::new(tiny(2, 16, 16, 3), ModelKind::Mae, 1).unwrap();
        let (b, skips) = m.encode(&cube([2, 16, 16, 3], 2), None).unwrap();
        assert_eq!(b.dims(), [2, 2, 2, 64]);
        let dims: Vec<_> = skips.features.iter().map(TokenGrid::dims).collect();
        assert_eq!(dims, vec![[2, 4, 4, 32], [2, 2, 2, 64]]);
        skips.check().unwrap();
        let rec = m.decode_mae(&b).unwrap();
        assert_eq!(rec.shape(), [2, 16, 16, 3]);
    }

    #[test]
    fn all_false_mask_matches_unmasked() {
        let m = Model::new(tiny(2, 16, 16, 3), ModelKind::Mae, 3).unwrap();
        let c = cube([2, 16, 16, 3], 4);
        let a = m.reconstruct(&c, None).unwrap();
        let b = m.reconstruct(&c, Some(&MaskSpec::none([2, 4, 4]))).unwrap();
        assert_eq!(a, b);
        let mask = generate_window_mask(2, 4, 4, 0.5, 1).unwrap();
        assert_ne!(m.reconstruct(&c, Some(&mask)).unwrap(), a);
    }

    #[test]
    fn zero_weights_give_constant_reconstruction() {
        let mut m = Model::new(tiny(2, 16, 16, 3), ModelKind::Mae, 5).unwrap();
        let names: Vec<String> = m.params.names().map(str::to_owned).collect();
        for n in names {
            let t = m.params.get_mut(&n).unwrap();
            let fill = if n == "mae_head.bias" { 0.25 } else { 0.0 };
            *t = Tensor::full(t.shape(), fill);
        }
        let rec = m.reconstruct(&cube([2, 16, 16, 3], 6), None).unwrap();
        assert!(rec.data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn unet_shapes_and_errors() {
        let cfg = tiny(3, 16, 16, 2);
        let head = HeadConfig::segmentation(4, 1, 8);
        let m = Model::new(cfg.clone(), ModelKind::Unet { head: head.clone() }, 1).unwrap();
        assert_eq!(m.unet_forward(&cube([3, 16, 16, 2], 1)).unwrap().shape(), &[1, 16, 16, 4]);
        assert!(m.reconstruct(&cube([3, 16, 16, 2], 1), Some(&MaskSpec::none([3, 4, 4]))).is_err());

        let bad = HeadConfig { t_out: 4, ..head.clone() };
        assert!(Model::new(cfg.clone(), ModelKind::Unet { head: bad }, 1).is_err());

        let modulate_first = HeadConfig {
            head_order: HeadOrder::ModulateThenExpand,
            ..HeadConfig::regression(1, 4)
        };
        let m = Model::new(cfg, ModelKind::Unet { head: modulate_first }, 1).unwrap();
        assert_eq!(m.unet_forward(&cube([3, 16, 16, 2], 1)).unwrap().shape(), &[1, 16, 16, 1]);
        match m.predict(&cube([3, 16, 16, 2], 1)).unwrap() {
            Prediction::Density(d) => assert!(d.iter().all(|v| (0.0..=100.0).contains(v))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fusion_with_identity_decoder_half_matches_no_skip() {
        let cfg = tiny(2, 16, 16, 2);
        let with = HeadConfig::segmentation(2, 1, 4);
        let without = HeadConfig { skip_connections: false, ..with.clone() };
        let mut a = Model::new(cfg.clone(), ModelKind::Unet { head: with }, 7).unwrap();
        let mut b_params = a.params.clone();
        let c = cfg.embed_dim;
        let mut fuse = Tensor::zeros(&[2 * c, c]);
        for i in 0..c {
            fuse.data_mut()[(c + i) * c + i] = 1.0;
        }
        a.params.insert("decoder.level0.fuse.weight", fuse);
        a.params.insert("decoder.level0.fuse.bias", Tensor::zeros(&[c]));
        b_params.remove("decoder.level0.fuse.weight");
        b_params.remove("decoder.level0.fuse.bias");
        let b = Model::from_params(cfg, ModelKind::Unet { head: without }, b_params).unwrap();
        let x = cube([2, 16, 16, 2], 8);
        assert_eq!(a.unet_forward(&x).unwrap(), b.unet_forward(&x).unwrap());
    }

    #[test]
    fn transfer_accounting_and_errors() {
        let cfg = tiny(2, 16, 16, 2);
        let pre = Model::new(cfg.clone(), ModelKind::Mae, 1).unwrap();
        let (ft, report) = transfer_weights(&pre, &cfg, HeadConfig::segmentation(2, 1, 4), 2).unwrap();
        let mask = pre.params.get("encoder.mask_token").unwrap().len();
        assert_eq!(report.copied_scalars, trunk_scalars(&pre.params) - mask);
        assert!(report.dropped.contains(&"encoder.mask_token".to_string()));
        assert!(report.fresh.iter().any(|n| n.contains(".fuse.")));
        assert_eq!(ft.params.get("encoder.stage0.block0.attn.qkv.weight"), pre.params.get("encoder.stage0.block0.attn.qkv.weight"));

        let deeper = ModelConfig {
            stage_depths: vec![1, 2],
            ..cfg.clone()
        };
        let err = transfer_weights(&pre, &deeper, HeadConfig::segmentation(2, 1, 4), 2).unwrap_err();
        match err {
            Error::Incompatible(v) => assert!(v[0].contains("encoder.stage1"), "{v:?}"),
            other => panic!("{other:?}"),
        }

        // a larger chip keeps the weight layout
        let big = cfg.with_input(2, 32, 32);
        assert!(transfer_weights(&pre, &big, HeadConfig::segmentation(2, 1, 4), 2).is_ok());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::new(tiny(2, 16, 16, 3), ModelKind::Mae, 9).unwrap();
        let c = cube([2, 16, 16, 3], 10);
        assert_eq!(m.reconstruct(&c, None).unwrap(), m.reconstruct(&c, None).unwrap());
    }
}
