//! A small reverse-mode tape.
//!
//! Ops are coarse (a linear layer, a layer norm, a whole batch of windowed
//! attention heads), so the bookkeeping cost stays negligible next to the
//! GEMMs. Every lattice rearrangement in the network (patch partition, window
//! partition, cyclic shift, merge/expand shuffles, padding) is a row gather,
//! whose adjoint is a scatter-add.

use std::sync::Arc;

use crate::attention::{attention_backward, attention_forward, AttentionLayout};
use crate::tensor::{gemm, Tensor};

/// Sentinel row index in a gather map: the output row is zero (padding).
pub const PAD_ROW: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
        row: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Attention {
        qkv: Var,
        table: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<f64>,
    },
    MaskReplace {
        x: Var,
        token: Var,
        mask: Arc<[bool]>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    WeightedMse {
        pred: Var,
        target: Arc<[f64]>,
        weight: Arc<[f64]>,
        denom: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        row_weight: Vec<f64>,
        probs: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// `x · w (+ b)` over the trailing axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), k, "linear: input width {} vs weight rows {k}", xv.last_dim());
        let m = xv.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), k, 1, wv.data(), n, 1, &mut out, n, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n);
            for row in out.chunks_exact_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        assert_eq!(g.len(), c);
        let mut out = vec![0.0; rows * c];
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bta[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        if !rg {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Row gather: view `x` as rows of `row` values; output row `r` copies
    /// input row `index[r]`, or zeros when it is [`PAD_ROW`].
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, row: usize, out_shape: Vec<usize>) -> Var {
        let out = gather_rows(self.value(x).data(), &index, row);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(out_shape, out), Op::Gather { x, index, row }, rg)
    }

    /// Concatenate along the trailing axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        assert_eq!(av.rows(), bv.rows(), "concat: row mismatch");
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Concat { a, b }, rg)
    }

    /// Multi-head attention inside each window. `qkv` is `[windows·volume, 3C]`
    /// in window-major row order; `table` is the relative-position bias table.
    pub fn window_attention(&mut self, qkv: Var, table: Var, layout: Arc<AttentionLayout>) -> Var {
        let rg = self.any_grad(&[qkv, table]);
        let (out, probs) = attention_forward(self.value(qkv).data(), self.value(table).data(), &layout, rg);
        let c = layout.heads * layout.head_dim;
        let shape = vec![layout.windows * layout.volume, c];
        self.push(
            Tensor::new(shape, out),
            Op::Attention {
                qkv,
                table,
                layout,
                probs,
            },
            rg,
        )
    }

    /// Replace the rows flagged in `mask` by `token`.
    pub fn mask_replace(&mut self, x: Var, token: Var, mask: Arc<[bool]>) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let tv = self.value(token).data();
        assert_eq!(tv.len(), c, "mask token width");
        assert_eq!(mask.len(), xv.rows(), "mask rows");
        let mut out = xv.clone();
        for (row, &m) in out.data_mut().chunks_exact_mut(c).zip(mask.iter()) {
            if m {
                row.copy_from_slice(tv);
            }
        }
        let rg = self.any_grad(&[x, token]);
        self.push(out, Op::MaskReplace { x, token, mask }, rg)
    }

    /// Depthwise convolution along the leading (time) axis of `[T, H, W, C]`.
    /// `w` is `[k, C]`, `b` is `[C]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var, stride: usize, t_out: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (k, c) = (wv.shape()[0], wv.shape()[1]);
        let t_in = xv.shape()[0];
        assert_eq!(xv.last_dim(), c);
        assert!((t_out - 1) * stride + k <= t_in, "temporal conv window exceeds input");
        let frame = xv.len() / t_in;
        let bv = self.value(b).data();
        let mut out = vec![0.0; t_out * frame];
        for to in 0..t_out {
            let dst = &mut out[to * frame..(to + 1) * frame];
            for (px, chunk) in dst.chunks_exact_mut(c).enumerate() {
                chunk.copy_from_slice(bv);
                for kk in 0..k {
                    let src = &xv.data()[(to * stride + kk) * frame + px * c..][..c];
                    let wk = &wv.data()[kk * c..(kk + 1) * c];
                    for j in 0..c {
                        chunk[j] += wk[j] * src[j];
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = t_out;
        let rg = self.any_grad(&[x, w, b]);
        self.push(Tensor::new(shape, out), Op::TemporalConv { x, w, b, stride }, rg)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// `Σ weight·(pred − target)² / denom`.
    pub fn weighted_mse(&mut self, pred: Var, target: Arc<[f64]>, weight: Arc<[f64]>, denom: f64) -> Var {
        let pv = self.value(pred).data();
        assert_eq!(pv.len(), target.len());
        assert_eq!(pv.len(), weight.len());
        let mut acc = 0.0;
        for ((p, t), w) in pv.iter().zip(target.iter()).zip(weight.iter()) {
            if *w != 0.0 {
                acc += w * (p - t) * (p - t);
            }
        }
        let rg = self.any_grad(&[pred]);
        self.push(
            Tensor::scalar(acc / denom),
            Op::WeightedMse {
                pred,
                target,
                weight,
                denom,
            },
            rg,
        )
    }

    /// Weighted mean softmax cross-entropy over rows of `logits`.
    /// Rows labelled [`PAD_ROW`] are ignored. `class_weight` may be empty.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>, class_weight: &[f64]) -> Var {
        let lv = self.value(logits);
        let k = lv.last_dim();
        let rows = lv.rows();
        assert_eq!(labels.len(), rows);
        let mut probs = vec![0.0; rows * k];
        let mut row_weight = vec![0.0; rows];
        let mut acc = 0.0;
        let mut denom = 0.0;
        for r in 0..rows {
            let z = &lv.data()[r * k..(r + 1) * k];
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..k {
                let e = (z[j] - mx).exp();
                probs[r * k + j] = e;
                s += e;
            }
            for j in 0..k {
                probs[r * k + j] /= s;
            }
            let y = labels[r];
            if y == PAD_ROW {
                continue;
            }
            assert!(y < k, "label {y} out of range for {k} classes");
            let w = class_weight.get(y).copied().unwrap_or(1.0);
            row_weight[r] = w;
            denom += w;
            acc += w * (-(z[y] - mx - s.ln()));
        }
        let denom = if denom > 0.0 { denom } else { 1.0 };
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(acc / denom),
            Op::CrossEntropy {
                logits,
                labels,
                row_weight,
                probs,
                denom,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Allocate-or-reuse a zeroed gradient buffer shaped like `v`.
    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.value(v).shape())
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                if self.requires_grad(*x) {
                    let mut dx = self.zeros_like(*x);
                    // dx = g · wᵀ
                    gemm(m, n, k, gd, n, 1, wv.data(), 1, n, dx.data_mut(), k, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = self.zeros_like(*w);
                    // dw = xᵀ · g
                    gemm(k, m, n, xv.data(), 1, k, gd, n, 1, dw.data_mut(), n, false);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = self.zeros_like(*b);
                        for row in gd.chunks_exact(n) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let gam = self.value(*gamma).data();
                let mut dgamma = self.zeros_like(*gamma);
                let mut dbeta = self.zeros_like(*beta);
                let mut dx = self.zeros_like(*x);
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgamma.data_mut()[j] += gr[j] * hr[j];
                        dbeta.data_mut()[j] += gr[j];
                    }
                    let inv_c = 1.0 / c as f64;
                    let dxr = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        dxr[j] = rs * (dh - inv_c * sum_dh - hr[j] * inv_c * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data().iter().zip(gd).map(|(&v, &gg)| gg * gelu_grad(v)).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Gather { x, index, row } => {
                let mut dx = self.zeros_like(*x);
                scatter_add_rows(gd, index, *row, dx.data_mut());
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let mut da = self.zeros_like(*a);
                let mut db = self.zeros_like(*b);
                for ((row, ra), rb) in gd
                    .chunks_exact(ca + cb)
                    .zip(da.data_mut().chunks_exact_mut(ca))
                    .zip(db.data_mut().chunks_exact_mut(cb))
                {
                    ra.copy_from_slice(&row[..ca]);
                    rb.copy_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Attention {
                qkv,
                table,
                layout,
                probs,
            } => {
                let mut dqkv = self.zeros_like(*qkv);
                let mut dtable = self.zeros_like(*table);
                attention_backward(
                    self.value(*qkv).data(),
                    probs,
                    gd,
                    layout,
                    dqkv.data_mut(),
                    dtable.data_mut(),
                );
                self.accumulate(grads, *qkv, dqkv);
                self.accumulate(grads, *table, dtable);
            }
            Op::MaskReplace { x, token, mask } => {
                let c = self.value(*x).last_dim();
                let mut dx = g.clone();
                let mut dt = self.zeros_like(*token);
                for (row, &m) in dx.data_mut().chunks_exact_mut(c).zip(mask.iter()) {
                    if m {
                        for (d, v) in dt.data_mut().iter_mut().zip(row.iter()) {
                            *d += v;
                        }
                        row.fill(0.0);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *token, dt);
            }
            Op::TemporalConv { x, w, b, stride } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, c) = (wv.shape()[0], wv.shape()[1]);
                let t_in = xv.shape()[0];
                let frame = xv.len() / t_in;
                let t_out = g.shape()[0];
                let mut dx = self.zeros_like(*x);
                let mut dw = self.zeros_like(*w);
                let mut db = self.zeros_like(*b);
                for to in 0..t_out {
                    let go = &gd[to * frame..(to + 1) * frame];
                    for (px, gc) in go.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            db.data_mut()[j] += gc[j];
                        }
                        for kk in 0..k {
                            let off = (to * stride + kk) * frame + px * c;
                            for j in 0..c {
                                dw.data_mut()[kk * c + j] += gc[j] * xv.data()[off + j];
                                dx.data_mut()[off + j] += gc[j] * wv.data()[kk * c + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gg)| if v < *lo || v > *hi { 0.0 } else { gg })
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedMse {
                pred,
                target,
                weight,
                denom,
            } => {
                let scale = 2.0 * gd[0] / denom;
                let pv = self.value(*pred);
                let dx = Tensor::new(
                    pv.shape().to_vec(),
                    pv.data()
                        .iter()
                        .zip(target.iter())
                        .zip(weight.iter())
                        .map(|((p, t), w)| if *w == 0.0 { 0.0 } else { scale * w * (p - t) })
                        .collect(),
                );
                self.accumulate(grads, *pred, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                row_weight,
                probs,
                denom,
            } => {
                let k = self.value(*logits).last_dim();
                let mut dz = self.zeros_like(*logits);
                let scale = gd[0] / denom;
                for (r, &y) in labels.iter().enumerate() {
                    if y == PAD_ROW || row_weight[r] == 0.0 {
                        continue;
                    }
                    let s = scale * row_weight[r];
                    let dzr = &mut dz.data_mut()[r * k..(r + 1) * k];
                    for j in 0..k {
                        dzr[j] = s * probs[r * k + j];
                    }
                    dzr[y] -= s;
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn gather_rows(src: &[f64], index: &[usize], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; index.len() * row];
    for (dst, &i) in out.chunks_exact_mut(row).zip(index) {
        if i != PAD_ROW {
            dst.copy_from_slice(&src[i * row..(i + 1) * row]);
        }
    }
    out
}

pub(crate) fn scatter_add_rows(src: &[f64], index: &[usize], row: usize, dst: &mut [f64]) {
    for (s, &i) in src.chunks_exact(row).zip(index) {
        if i != PAD_ROW {
            for (d, v) in dst[i * row..(i + 1) * row].iter_mut().zip(s) {
                *d += v;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += eps;
                b[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let x0: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.01 * i as f64).collect();
        let gamma = vec![1.5, -0.5, 0.7, 1.1];
        let beta = vec![0.1, 0.2, -0.3, 0.0];
        let run = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![3, 4], x.to_vec()));
            let g = tape.constant(Tensor::new(vec![4], gamma.clone()));
            let b = tape.constant(Tensor::new(vec![4], beta.clone()));
            let y = tape.layer_norm(xv, g, b);
            let y = tape.gelu(y);
            let tgt: Arc<[f64]> = (0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>().into();
            let w: Arc<[f64]> = vec![1.0; 12].into();
            let l = tape.weighted_mse(y, tgt, w, 12.0);
            let grads = tape.backward(l);
            (tape.value(l).item(), grads.get(xv).unwrap().data().to_vec())
        };
        let (_, analytic) = run(&x0);
        let numeric = numeric_grad(&|x| run(x).0, &x0);
        close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn cross_entropy_ignores_padded_rows() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, 3.0, -1.0, 0.0]));
        let labels: Arc<[usize]> = vec![1, PAD_ROW].into();
        let l = tape.cross_entropy(z, labels, &[]);
        let g = tape.backward(l);
        let dz = g.get(z).unwrap().data();
        assert!(dz[3..].iter().all(|v| *v == 0.0));
        let s: f64 = dz[..3].iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let src: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let index = [3, PAD_ROW, 0, 3];
        let out = gather_rows(&src, &index, 2);
        assert_eq!(out, vec![6.0, 7.0, 0.0, 0.0, 0.0, 1.0, 6.0, 7.0]);
        let y: Vec<f64> = (0..8).map(|v| (v as f64).cos()).collect();
        let mut back = vec![0.0; 8];
        scatter_add_rows(&y, &index, 2, &mut back);
        let lhs: f64 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
