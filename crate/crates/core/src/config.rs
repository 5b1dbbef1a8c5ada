//! Architecture configuration, its validation, and the symbolic shape pipeline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// How masked positions are chosen inside each time slice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Uniform random tokens per slice.
    #[default]
    Random,
    /// Whole `Mh × Mw` spatial windows per slice.
    WindowAligned,
}

/// Full architectural hyperparameter record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(pt, ph, pw)`
    pub patch_size: [usize; 3],
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// `(Mt, Mh, Mw)`
    pub window: [usize; 3],
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    pub num_bands: usize,
    pub num_timesteps: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Block count per decoder level, coarsest level first.
    pub decoder_depths: Vec<usize>,
    /// Layer norm ahead of the patch-merge projection.
    #[serde(default = "default_true")]
    pub merge_norm: bool,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Swin-B widths (C = 128, heads 4/8/16/32 at d = 32).
    pub fn swin_base(t: usize, h: usize, w: usize, bands: usize) -> Self {
        Self {
            patch_size: [1, 4, 4],
            embed_dim: 128,
            stage_depths: vec![2, 2, 18, 2],
            stage_heads: vec![4, 8, 16, 32],
            window: [t, 7, 7],
            head_dim: 32,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            num_bands: bands,
            num_timesteps: t,
            input_height: h,
            input_width: w,
            decoder_depths: vec![2, 2, 2],
            merge_norm: true,
            mask_mode: MaskMode::Random,
        }
    }

    /// Swin-T widths (C = 96, heads 3/6/12/24).
    pub fn swin_tiny(t: usize, h: usize, w: usize, bands: usize) -> Self {
        Self {
            embed_dim: 96,
            stage_depths: vec![2, 2, 6, 2],
            stage_heads: vec![3, 6, 12, 24],
            ..Self::swin_base(t, h, w, bands)
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Channel width at encoder stage `i`.
    pub fn stage_width(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.num_timesteps, self.input_height, self.input_width, self.num_bands]
    }

    /// Token lattice right after patch embedding: `[T', Gh, Gw]`.
    pub fn token_grid(&self) -> [usize; 3] {
        let [pt, ph, pw] = self.patch_size;
        [self.num_timesteps / pt, self.input_height / ph, self.input_width / pw]
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    /// Same config for a different input size (channel/weight layout unchanged).
    pub fn with_input(&self, t: usize, h: usize, w: usize) -> Self {
        Self {
            num_timesteps: t,
            input_height: h,
            input_width: w,
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ConfigError {
    #[error("dimension mismatch in `{field}`: {detail}")]
    DimensionMismatch { field: &'static str, detail: String },

    #[error("stage {stage}: {axis} extent {size} is not divisible by {divisor}")]
    Divisibility {
        stage: usize,
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("stage {stage}: {heads} heads × head_dim {head_dim} ≠ channel width {width}")]
    StageWidth {
        stage: usize,
        heads: usize,
        head_dim: usize,
        width: String,
    },

    #[error("mask_ratio out of open interval (0, 1): {0}")]
    MaskRatio(f64),

    #[error("window: {0}")]
    Window(String),

    #[error("`{0}` must be positive")]
    NonPositive(&'static str),
}

/// Checks every structural invariant of `cfg` against an input of shape
/// `(T, H, W, B)` and returns all violations found.
pub fn validate_config(cfg: &ModelConfig, input_shape: (usize, usize, usize, usize)) -> Result<(), Vec<ConfigError>> {
    let mut errs = Vec::new();
    let (t, h, w, b) = input_shape;

    for (field, expected, got) in [
        ("num_timesteps", cfg.num_timesteps, t),
        ("input_height", cfg.input_height, h),
        ("input_width", cfg.input_width, w),
        ("num_bands", cfg.num_bands, b),
    ] {
        if expected != got {
            errs.push(ConfigError::DimensionMismatch {
                field,
                detail: format!("config says {expected}, input has {got}"),
            });
        }
    }

    let positives: [(&'static str, usize); 9] = [
        ("patch_size.t", cfg.patch_size[0]),
        ("patch_size.h", cfg.patch_size[1]),
        ("patch_size.w", cfg.patch_size[2]),
        ("embed_dim", cfg.embed_dim),
        ("head_dim", cfg.head_dim),
        ("num_bands", b),
        ("num_timesteps", t),
        ("input_height", h),
        ("input_width", w),
    ];
    for (field, v) in positives {
        if v == 0 {
            errs.push(ConfigError::NonPositive(field));
        }
    }
    if cfg.window.contains(&0) {
        errs.push(ConfigError::NonPositive("window"));
    }
    if cfg.stage_depths.is_empty() {
        errs.push(ConfigError::NonPositive("stage_depths"));
    }
    if cfg.stage_depths.contains(&0) {
        errs.push(ConfigError::NonPositive("stage_depths"));
    }
    if cfg.decoder_depths.contains(&0) {
        errs.push(ConfigError::NonPositive("decoder_depths"));
    }
    if cfg.stage_heads.contains(&0) {
        errs.push(ConfigError::NonPositive("stage_heads"));
    }
    if !(cfg.mlp_ratio.is_finite() && cfg.mlp_ratio > 0.0) {
        errs.push(ConfigError::NonPositive("mlp_ratio"));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        errs.push(ConfigError::MaskRatio(cfg.mask_ratio));
    }

    let stages = cfg.stage_depths.len();
    if cfg.stage_heads.len() != stages {
        errs.push(ConfigError::DimensionMismatch {
            field: "stage_heads",
            detail: format!("{} entries for {stages} stages", cfg.stage_heads.len()),
        });
    }
    if stages > 0 && cfg.decoder_depths.len() != stages - 1 {
        errs.push(ConfigError::DimensionMismatch {
            field: "decoder_depths",
            detail: format!("{} entries, expected {} (one per decoder level)", cfg.decoder_depths.len(), stages - 1),
        });
    }

    for (stage, &heads) in cfg.stage_heads.iter().enumerate().take(stages) {
        let width = u32::try_from(stage)
            .ok()
            .and_then(|s| 1usize.checked_shl(s))
            .and_then(|f| cfg.embed_dim.checked_mul(f));
        let product = heads.checked_mul(cfg.head_dim);
        if width.is_none() || product != width {
            errs.push(ConfigError::StageWidth {
                stage,
                heads,
                head_dim: cfg.head_dim,
                width: width.map_or_else(|| "overflow".to_string(), |v| v.to_string()),
            });
        }
    }

    let [mt, mh, mw] = cfg.window;
    if mh != mw {
        errs.push(ConfigError::Window(format!("spatial window must be square, got {mh}×{mw}")));
    }

    let [pt, ph, pw] = cfg.patch_size;
    if pt > 0 && t % pt != 0 {
        errs.push(ConfigError::Divisibility {
            stage: 0,
            axis: "time",
            size: t,
            divisor: pt,
        });
    }
    if pt > 0 && mt > t / pt {
        errs.push(ConfigError::Window(format!("temporal window {mt} exceeds {} time tokens", t / pt)));
    }
    for (axis, size, p) in [("height", h, ph), ("width", w, pw)] {
        if p == 0 || size == 0 {
            continue;
        }
        if size % p != 0 {
            errs.push(ConfigError::Divisibility {
                stage: 0,
                axis,
                size,
                divisor: p,
            });
            continue;
        }
        let mut grid = size / p;
        for stage in 0..stages.saturating_sub(1) {
            if grid % 2 != 0 {
                errs.push(ConfigError::Divisibility {
                    stage,
                    axis,
                    size: grid,
                    divisor: 2,
                });
                break;
            }
            grid /= 2;
        }
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// [`validate_config`] against the config's own input shape, as a crate error.
pub fn check_config(cfg: &ModelConfig) -> Result<()> {
    let [t, h, w, b] = cfg.input_shape();
    validate_config(cfg, (t, h, w, b)).map_err(Error::Config)
}

/// Effective window and shift for a grid: windows are clamped to the grid,
/// and an axis whose grid fits in one window is not shifted.
pub fn stage_window(window: [usize; 3], grid: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut eff = [0; 3];
    let mut shift = [0; 3];
    for a in 0..3 {
        eff[a] = window[a].min(grid[a]).max(1);
        shift[a] = if grid[a] > window[a] { window[a] / 2 } else { 0 };
    }
    (eff, shift)
}

/// Downstream task solved by the finetuning head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    Segmentation { num_classes: usize },
    /// Per-pixel density in `[0, 100]`.
    Regression,
}

impl Task {
    pub fn output_channels(&self) -> usize {
        match self {
            Task::Segmentation { num_classes } => *num_classes,
            Task::Regression => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadOrder {
    #[default]
    ExpandThenModulate,
    ModulateThenExpand,
}

/// Finetuning head: skip fusion, final expansion, temporal modulator, task head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub task: Task,
    /// Output frames produced by the temporal modulator.
    pub t_out: usize,
    /// Temporal kernel; defaults to `T − t_out + 1` (stride 1).
    #[serde(default)]
    pub temporal_kernel: Option<usize>,
    /// Channels per pixel after the final expansion.
    pub head_channels: usize,
    #[serde(default = "default_true")]
    pub skip_connections: bool,
    #[serde(default)]
    pub head_order: HeadOrder,
}

impl HeadConfig {
    pub fn segmentation(num_classes: usize, t_out: usize, head_channels: usize) -> Self {
        Self {
            task: Task::Segmentation { num_classes },
            t_out,
            temporal_kernel: None,
            head_channels,
            skip_connections: true,
            head_order: HeadOrder::ExpandThenModulate,
        }
    }

    pub fn regression(t_out: usize, head_channels: usize) -> Self {
        Self {
            task: Task::Regression,
            ..Self::segmentation(1, t_out, head_channels)
        }
    }

    /// Kernel size and stride of the temporal modulator for `t_in` input frames.
    pub fn temporal_geometry(&self, t_in: usize) -> Result<(usize, usize)> {
        let t_out = self.t_out;
        if t_out == 0 || t_out > t_in {
            return Err(Error::Invalid(format!("t_out {t_out} must be in 1..={t_in}")));
        }
        let k = self.temporal_kernel.unwrap_or(t_in - t_out + 1);
        if k == 0 || k > t_in {
            return Err(Error::Invalid(format!("temporal kernel {k} must be in 1..={t_in}")));
        }
        if t_out == 1 {
            if k != t_in {
                return Err(Error::Invalid(format!(
                    "a single output frame needs the kernel to span all {t_in} frames, got {k}"
                )));
            }
            return Ok((k, 1));
        }
        let span = t_in - k;
        if span == 0 || !span.is_multiple_of(t_out - 1) {
            return Err(Error::Invalid(format!(
                "no integer stride maps {t_in} frames to {t_out} with kernel {k}"
            )));
        }
        Ok((k, span / (t_out - 1)))
    }
}

/// Shapes of one stage of blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    /// `[T, Gh, Gw, C]`
    pub grid: [usize; 4],
    pub depth: usize,
    pub heads: usize,
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

/// Every tensor shape a forward pass produces, derived from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePipeline {
    pub input: [usize; 4],
    pub tokens: [usize; 4],
    pub stages: Vec<StagePlan>,
    pub bottleneck: [usize; 4],
    /// Decoder levels, coarsest first.
    pub decoder: Vec<StagePlan>,
    pub reconstruction: [usize; 4],
}

impl ShapePipeline {
    /// Assumes `cfg` already passed validation.
    pub fn new(cfg: &ModelConfig) -> Self {
        let [tt, gh, gw] = cfg.token_grid();
        let c = cfg.embed_dim;
        let stages: Vec<StagePlan> = (0..cfg.num_stages())
            .map(|i| {
                let grid3 = [tt, gh >> i, gw >> i];
                let (window, shift) = stage_window(cfg.window, grid3);
                StagePlan {
                    grid: [grid3[0], grid3[1], grid3[2], c << i],
                    depth: cfg.stage_depths[i],
                    heads: cfg.stage_heads[i],
                    window,
                    shift,
                }
            })
            .collect();
        let bottleneck = stages.last().map(|s| s.grid).unwrap_or([tt, gh, gw, c]);
        let decoder = (0..cfg.num_stages().saturating_sub(1))
            .rev()
            .enumerate()
            .map(|(level, j)| StagePlan {
                depth: cfg.decoder_depths[level],
                ..stages[j].clone()
            })
            .collect();
        Self {
            input: cfg.input_shape(),
            tokens: [tt, gh, gw, c],
            stages,
            bottleneck,
            decoder,
            reconstruction: cfg.input_shape(),
        }
    }

    /// Output of the finetuning network: `[T_out, H, W, channels]`.
    pub fn unet_output(&self, head: &HeadConfig) -> [usize; 4] {
        [head.t_out, self.input[1], self.input[2], head.task.output_channels()]
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input          {:?}", self.input);
        let _ = writeln!(s, "tokens         {:?}", self.tokens);
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(
                s,
                "encoder.stage{i} {:?} depth={} heads={} window={:?} shift={:?}",
                st.grid, st.depth, st.heads, st.window, st.shift
            );
        }
        let _ = writeln!(s, "bottleneck     {:?}", self.bottleneck);
        for (i, st) in self.decoder.iter().enumerate() {
            let _ = writeln!(
                s,
                "decoder.level{i} {:?} depth={} heads={} window={:?} shift={:?}",
                st.grid, st.depth, st.heads, st.window, st.shift
            );
        }
        let _ = writeln!(s, "reconstruction {:?}", self.reconstruction);
        s
    }
}
