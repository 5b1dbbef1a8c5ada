//! 3D (shifted-)window multi-head self-attention and the Swin block built on it.

use std::sync::Arc;

use crate::autograd::{Tape, Var, PAD_ROW};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use crate::types::TokenGrid;

/// Additive value standing in for −∞ in attention masks.
pub const MASK_NEG: f64 = -1e4;

/// How a `[T, Gh, Gw]` lattice is padded, rolled, and cut into windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
}

impl WindowGeometry {
    /// Zero-pads each axis on the high side up to a multiple of the window.
    pub fn new(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Self {
        let mut padded = [0; 3];
        for a in 0..3 {
            assert!(window[a] > 0, "window extents must be positive");
            assert!(shift[a] < window[a], "shift {shift:?} must be below window {window:?}");
            padded[a] = grid[a].div_ceil(window[a]) * window[a];
        }
        Self {
            grid,
            window,
            shift,
            padded,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.padded[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn volume(&self) -> usize {
        self.window.iter().product()
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.grid
    }

    pub fn is_shifted(&self) -> bool {
        self.shift != [0, 0, 0]
    }

    /// Shifted-frame coordinates of windowed position `pos`.
    fn shifted_coords(&self, pos: usize) -> [usize; 3] {
        let v = self.volume();
        let (win, inner) = (pos / v, pos % v);
        let counts = self.counts();
        let wc = [win / (counts[1] * counts[2]), (win / counts[2]) % counts[1], win % counts[2]];
        let ic = [
            inner / (self.window[1] * self.window[2]),
            (inner / self.window[2]) % self.window[1],
            inner % self.window[2],
        ];
        [0, 1, 2].map(|a| wc[a] * self.window[a] + ic[a])
    }

    /// Padded-lattice coordinates for a shifted-frame position.
    fn unshifted(&self, s: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| (s[a] + self.shift[a]) % self.padded[a])
    }

    fn grid_row(&self, p: [usize; 3]) -> Option<usize> {
        if (0..3).all(|a| p[a] < self.grid[a]) {
            Some((p[0] * self.grid[1] + p[1]) * self.grid[2] + p[2])
        } else {
            None
        }
    }

    /// For each windowed position, the source grid row (or [`PAD_ROW`]).
    /// Combines padding, the cyclic roll by `−shift`, and the partition.
    pub fn partition_index(&self) -> Vec<usize> {
        let n = self.num_windows() * self.volume();
        (0..n)
            .map(|pos| self.grid_row(self.unshifted(self.shifted_coords(pos))).unwrap_or(PAD_ROW))
            .collect()
    }

    /// For each grid row, its windowed position (inverse of [`Self::partition_index`]).
    pub fn reverse_index(&self) -> Vec<usize> {
        let fwd = self.partition_index();
        let mut inv = vec![0; self.grid.iter().product()];
        for (pos, &row) in fwd.iter().enumerate() {
            if row != PAD_ROW {
                inv[row] = pos;
            }
        }
        inv
    }

    /// Region id of a shifted-frame position: tokens that wrapped around
    /// during the roll get a different id from their new neighbours.
    fn region(&self, s: [usize; 3]) -> usize {
        let mut id = 0;
        for a in 0..3 {
            let r = if self.shift[a] == 0 || s[a] < self.padded[a] - self.window[a] {
                0
            } else if s[a] < self.padded[a] - self.shift[a] {
                1
            } else {
                2
            };
            id = id * 3 + r;
        }
        id
    }

    pub fn boundary_mask(&self) -> BoundaryMask {
        let (nw, v) = (self.num_windows(), self.volume());
        let mut data = vec![0.0; nw * v * v];
        if self.is_shifted() {
            for w in 0..nw {
                let ids: Vec<usize> = (0..v).map(|i| self.region(self.shifted_coords(w * v + i))).collect();
                for i in 0..v {
                    for j in 0..v {
                        if ids[i] != ids[j] {
                            data[(w * v + i) * v + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
        BoundaryMask {
            windows: nw,
            volume: v,
            data,
        }
    }

    /// Boundary mask plus suppression of padded keys; `None` when neither applies.
    pub fn attention_mask(&self) -> Option<Vec<f64>> {
        if !self.is_shifted() && !self.is_padded() {
            return None;
        }
        let mut mask = self.boundary_mask().data;
        if self.is_padded() {
            let (nw, v) = (self.num_windows(), self.volume());
            for w in 0..nw {
                for j in 0..v {
                    let p = self.unshifted(self.shifted_coords(w * v + j));
                    if self.grid_row(p).is_none() {
                        for i in 0..v {
                            mask[(w * v + i) * v + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
        Some(mask)
    }
}

/// Additive mask `[windows, volume, volume]` with entries in `{0, MASK_NEG}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMask {
    pub windows: usize,
    pub volume: usize,
    pub data: Vec<f64>,
}

impl BoundaryMask {
    pub fn get(&self, w: usize, i: usize, j: usize) -> f64 {
        self.data[(w * self.volume + i) * self.volume + j]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Mask for a grid of `dims` cut into `window` windows after a roll by `−shift`.
pub fn build_boundary_mask(dims: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> BoundaryMask {
    WindowGeometry::new(dims, window, shift).boundary_mask()
}

/// Tokens grouped by window: `[num_windows, volume, C]` plus the geometry
/// needed to undo the grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub data: Tensor,
    pub geometry: WindowGeometry,
}

/// Pads (high side) and cuts a grid into non-overlapping windows, token
/// order inside each window row-major `(t, h, w)`.
pub fn window_partition(grid: &TokenGrid, window: [usize; 3]) -> WindowSet {
    let [t, gh, gw, c] = grid.dims();
    let geometry = WindowGeometry::new([t, gh, gw], window, [0, 0, 0]);
    let idx = geometry.partition_index();
    let data = crate::autograd::gather_rows(grid.tensor().data(), &idx, c);
    WindowSet {
        data: Tensor::new(vec![geometry.num_windows(), geometry.volume(), c], data),
        geometry,
    }
}

/// Exact inverse of [`window_partition`], cropping padding.
pub fn window_reverse(ws: &WindowSet) -> Result<TokenGrid> {
    let g = &ws.geometry;
    let s = ws.data.shape();
    if s.len() != 3 || s[0] != g.num_windows() || s[1] != g.volume() {
        return Err(Error::Shape(format!(
            "window set {s:?} does not match its geometry ({} windows of {})",
            g.num_windows(),
            g.volume()
        )));
    }
    let c = s[2];
    let idx = g.reverse_index();
    let data = crate::autograd::gather_rows(ws.data.data(), &idx, c);
    TokenGrid::new(Tensor::new(vec![g.grid[0], g.grid[1], g.grid[2], c], data))
}

/// Toroidal roll: `out[p] = in[(p − offsets) mod dims]`.
pub fn cyclic_shift(grid: &TokenGrid, offsets: [isize; 3]) -> TokenGrid {
    let [t, gh, gw, c] = grid.dims();
    let dims = [t, gh, gw];
    let mut idx = Vec::with_capacity(t * gh * gw);
    for a in 0..t {
        for i in 0..gh {
            for j in 0..gw {
                let p = [a, i, j];
                let src: [usize; 3] =
                    [0, 1, 2].map(|k| (p[k] as isize - offsets[k]).rem_euclid(dims[k] as isize) as usize);
                idx.push((src[0] * gh + src[1]) * gw + src[2]);
            }
        }
    }
    let data = crate::autograd::gather_rows(grid.tensor().data(), &idx, c);
    TokenGrid::new(Tensor::new(vec![t, gh, gw, c], data)).expect("rank 4")
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift(grid: &TokenGrid, offsets: [isize; 3]) -> TokenGrid {
    cyclic_shift(grid, offsets.map(|o| -o))
}

/// Rows of the relative-position bias table.
pub fn bias_table_rows(table_window: [usize; 3]) -> usize {
    table_window.iter().map(|m| 2 * m - 1).product()
}

/// Table row for every (query, key) pair of a `window`, with offsets laid out
/// for a table sized by `table_window` (≥ `window` on each axis).
pub fn relative_index(window: [usize; 3], table_window: [usize; 3]) -> Vec<usize> {
    let v: usize = window.iter().product();
    let coords: Vec<[usize; 3]> = (0..v)
        .map(|i| [i / (window[1] * window[2]), (i / window[2]) % window[1], i % window[2]])
        .collect();
    let span = table_window.map(|m| 2 * m - 1);
    let mut idx = Vec::with_capacity(v * v);
    for qi in &coords {
        for kj in &coords {
            let d = [0, 1, 2].map(|a| qi[a] + table_window[a] - 1 - kj[a]);
            idx.push((d[0] * span[1] + d[1]) * span[2] + d[2]);
        }
    }
    idx
}

/// Static description of one batched window-attention call.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub windows: usize,
    pub volume: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rel_index: Vec<usize>,
    /// `[windows, volume, volume]` additive mask.
    pub mask: Option<Vec<f64>>,
}

impl AttentionLayout {
    /// Elements of the attention-score tensor this call materializes.
    pub fn score_elements(&self) -> usize {
        self.windows * self.heads * self.volume * self.volume
    }
}

/// Softmax(QKᵀ/√d + bias + mask)·V per window and head. Returns the
/// concatenated head outputs and, when `keep_probs`, the attention weights.
pub(crate) fn attention_forward(
    qkv: &[f64],
    table: &[f64],
    layout: &AttentionLayout,
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (nw, v, heads, d) = (layout.windows, layout.volume, layout.heads, layout.head_dim);
    let c = heads * d;
    assert_eq!(qkv.len(), nw * v * 3 * c, "qkv size");
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nw * v * c];
    let mut probs = if keep_probs { vec![0.0; nw * heads * v * v] } else { Vec::new() };
    let mut s = vec![0.0; v * v];
    for w in 0..nw {
        let base = w * v * 3 * c;
        let mask = layout.mask.as_ref().map(|m| &m[w * v * v..(w + 1) * v * v]);
        for h in 0..heads {
            gemm(v, d, v, &qkv[base + h * d..], 3 * c, 1, &qkv[base + c + h * d..], 1, 3 * c, &mut s, v, false);
            for i in 0..v {
                let row = &mut s[i * v..(i + 1) * v];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..v {
                    let mut val = row[j] * scale + table[layout.rel_index[i * v + j] * heads + h];
                    if let Some(m) = mask {
                        val += m[i * v + j];
                    }
                    row[j] = val;
                    mx = mx.max(val);
                }
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            gemm(v, v, d, &s, v, 1, &qkv[base + 2 * c + h * d..], 3 * c, 1, &mut out[w * v * c + h * d..], c, false);
            if keep_probs {
                probs[(w * heads + h) * v * v..(w * heads + h + 1) * v * v].copy_from_slice(&s);
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    layout: &AttentionLayout,
    dqkv: &mut [f64],
    dtable: &mut [f64],
) {
    let (nw, v, heads, d) = (layout.windows, layout.volume, layout.heads, layout.head_dim);
    let c = heads * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dp = vec![0.0; v * v];
    for w in 0..nw {
        let base = w * v * 3 * c;
        for h in 0..heads {
            let p = &probs[(w * heads + h) * v * v..(w * heads + h + 1) * v * v];
            let dob = &dout[w * v * c + h * d..];
            // dV = Pᵀ dO
            gemm(v, v, d, p, 1, v, dob, c, 1, &mut dqkv[base + 2 * c + h * d..], 3 * c, true);
            // dP = dO Vᵀ
            gemm(v, d, v, dob, c, 1, &qkv[base + 2 * c + h * d..], 1, 3 * c, &mut dp, v, false);
            for i in 0..v {
                let pr = &p[i * v..(i + 1) * v];
                let dr = &mut dp[i * v..(i + 1) * v];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..v {
                    let ds = pr[j] * (dr[j] - dot);
                    dtable[layout.rel_index[i * v + j] * heads + h] += ds;
                    dr[j] = ds * scale;
                }
            }
            // dQ = dS K ; dK = dSᵀ Q
            gemm(v, v, d, &dp, v, 1, &qkv[base + c + h * d..], 3 * c, 1, &mut dqkv[base + h * d..], 3 * c, true);
            gemm(v, v, d, &dp, 1, v, &qkv[base + h * d..], 3 * c, 1, &mut dqkv[base + c + h * d..], 3 * c, true);
        }
    }
}

/// Window attention on a [`WindowSet`] with explicit weights (no tape).
pub fn window_attention(ws: &WindowSet, w: &AttentionWeights, bmask: Option<&BoundaryMask>) -> Result<WindowSet> {
    let s = ws.data.shape();
    let (nw, v, c) = (s[0], s[1], s[2]);
    if c != w.heads * w.head_dim {
        return Err(Error::Shape(format!(
            "{} heads × {} head_dim ≠ {c} channels",
            w.heads, w.head_dim
        )));
    }
    let layout = Arc::new(AttentionLayout {
        windows: nw,
        volume: v,
        heads: w.heads,
        head_dim: w.head_dim,
        rel_index: relative_index(ws.geometry.window, w.table_window),
        mask: bmask.map(|m| m.data.clone()),
    });
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::new(vec![nw * v, c], ws.data.data().to_vec()));
    let params = w.bind(&mut tape);
    let y = attention_core(&mut tape, x, &params, layout);
    Ok(WindowSet {
        data: tape.value(y).clone().reshape(vec![nw, v, c]),
        geometry: ws.geometry.clone(),
    })
}

/// Explicit attention parameters (for use outside a model).
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub bias_table: Tensor,
    pub table_window: [usize; 3],
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionWeights {
    fn bind(&self, tape: &mut Tape) -> AttentionParams {
        AttentionParams {
            qkv_w: tape.leaf(self.qkv_weight.clone()),
            qkv_b: tape.leaf(self.qkv_bias.clone()),
            proj_w: tape.leaf(self.proj_weight.clone()),
            proj_b: tape.leaf(self.proj_bias.clone()),
            table: tape.leaf(self.bias_table.clone()),
        }
    }
}

/// Attention parameters already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub table: Var,
}

/// qkv projection → windowed attention → output projection on windowed rows.
pub fn attention_core(tape: &mut Tape, windows: Var, p: &AttentionParams, layout: Arc<AttentionLayout>) -> Var {
    let qkv = tape.linear(windows, p.qkv_w, Some(p.qkv_b));
    let att = tape.window_attention(qkv, p.table, layout);
    tape.linear(att, p.proj_w, Some(p.proj_b))
}

/// All parameters of one Swin block, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: (Var, Var),
    pub attn: AttentionParams,
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

/// Index maps and masks shared by every block of a stage with the same shift.
#[derive(Clone, Debug)]
pub struct BlockPlan {
    pub geometry: WindowGeometry,
    partition: Arc<[usize]>,
    reverse: Arc<[usize]>,
    layout: Arc<AttentionLayout>,
}

impl BlockPlan {
    pub fn new(
        grid: [usize; 3],
        window: [usize; 3],
        shift: [usize; 3],
        table_window: [usize; 3],
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let geometry = WindowGeometry::new(grid, window, shift);
        let layout = AttentionLayout {
            windows: geometry.num_windows(),
            volume: geometry.volume(),
            heads,
            head_dim,
            rel_index: relative_index(window, table_window),
            mask: geometry.attention_mask(),
        };
        Self {
            partition: geometry.partition_index().into(),
            reverse: geometry.reverse_index().into(),
            layout: Arc::new(layout),
            geometry,
        }
    }

    pub fn layout(&self) -> &AttentionLayout {
        &self.layout
    }
}

/// Pre-norm Swin block:
/// `x ← x + WMSA(LN(x))`, then `x ← x + MLP(LN(x))` with a GELU hidden layer.
/// Whether the attention is shifted is decided by `plan`.
pub fn swin_block(tape: &mut Tape, x: Var, p: &BlockParams, plan: &BlockPlan) -> Result<Var> {
    let s = tape.value(x).shape();
    let g = &plan.geometry;
    if s.len() != 4 || s[..3] != g.grid {
        return Err(Error::Shape(format!("block planned for {:?}, got {s:?}", g.grid)));
    }
    let c = s[3];
    if c != plan.layout.heads * plan.layout.head_dim {
        return Err(Error::Shape(format!(
            "{} heads × {} head_dim ≠ {c} channels",
            plan.layout.heads, plan.layout.head_dim
        )));
    }
    let rows = g.num_windows() * g.volume();
    let h = tape.layer_norm(x, p.norm1.0, p.norm1.1);
    let win = tape.gather(h, plan.partition.clone(), c, vec![rows, c]);
    let att = attention_core(tape, win, &p.attn, plan.layout.clone());
    let back = tape.gather(att, plan.reverse.clone(), c, vec![g.grid[0], g.grid[1], g.grid[2], c]);
    let x = tape.add(x, back);
    let h = tape.layer_norm(x, p.norm2.0, p.norm2.1);
    let h = tape.linear(h, p.fc1.0, Some(p.fc1.1));
    let h = tape.gelu(h);
    let h = tape.linear(h, p.fc2.0, Some(p.fc2.1));
    Ok(tape.add(x, h))
}
