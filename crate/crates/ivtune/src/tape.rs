//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive records the information its backward rule needs while
//! computing the forward value. Node ids grow monotonically and an
//! operation's inputs always precede it, so a single reverse sweep visits
//! each node exactly once. Gradients are materialized lazily: a node that
//! does not participate in the loss never receives a buffer.
//!
//! Forward outputs are scanned for NaN/Inf as they are produced; training
//! blowups surface as errors instead of silently propagating.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch-norm mode, switched by the caller per forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// Elementwise a + b; b's shape is a suffix of a's.
    Add { a: Var, b: Var },
    /// Elementwise a ⊙ b; b's shape is a suffix of a's.
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// x[..., in] · wᵀ (+ b); w is [out, in].
    Linear { x: Var, w: Var, b: Option<Var> },
    /// Batched matmul over matching leading dims.
    Bmm { a: Var, b: Var, m: usize, k: usize, n: usize, transpose_b: bool },
    /// [B,N,C] -> [B,h,N,C/h]
    SplitHeads { x: Var, heads: usize },
    /// [B,h,N,dh] -> [B,N,h*dh]
    MergeHeads { x: Var },
    SoftmaxLast { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Relu { x: Var },
    /// [B,ch,H,W] -> [B,N,ch·p²] over non-overlapping p×p patches.
    Patchify { x: Var, patch: usize },
    /// [B,N,C] -> [B,C,gh,gw] with N = gh·gw.
    TokensToMap { x: Var, gh: usize, gw: usize },
    /// [B,C,H,W] -> [B,H·W,C]
    MapToTokens { x: Var },
    SliceCh { x: Var, lo: usize, hi: usize },
    ConcatCh { a: Var, b: Var },
    DwConv3x3 { x: Var, kernel: Var, bias: Var },
    PwConv1x1 { x: Var, weight: Var, bias: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, training: bool, mean: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
}

/// Gradients keyed by tape node, produced by [`Tape::backward`]. Only leaves
/// that require gradients and are reachable from the loss have entries.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node.remove(&v.0)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.by_node.contains_key(&v.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Recording tape. Confined to one execution context; construct one per
/// forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let id = self.nodes.len();
        self.nodes.push(Node { value, needs_grad, op });
        Ok(Var(id))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a leaf value. Gradients are produced for it only when
    /// `requires_grad` is set and the loss actually depends on it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        suffix_check("add", va.shape(), vb.shape())?;
        let bn = vb.numel();
        let mut out = va.data().to_vec();
        for chunk in out.chunks_exact_mut(bn) {
            for (o, r) in chunk.iter_mut().zip(vb.data()) {
                *o += r;
            }
        }
        let t = Tensor::from_raw(va.shape().to_vec(), va.dtype(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        suffix_check("mul", va.shape(), vb.shape())?;
        let bn = vb.numel();
        let mut out = va.data().to_vec();
        for chunk in out.chunks_exact_mut(bn) {
            for (o, r) in chunk.iter_mut().zip(vb.data()) {
                *o *= r;
            }
        }
        let t = Tensor::from_raw(va.shape().to_vec(), va.dtype(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|v| v * c).collect();
        let t = Tensor::from_raw(va.shape().to_vec(), va.dtype(), out);
        let needs = self.needs(a);
        self.push(t, needs, Op::Scale { a, c }, "scale")
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// Token-wise linear map: x[..., in] · wᵀ + b with w of shape [out, in].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape().len() != 2 {
            return Err(shape_err("linear", format!("weight must be rank 2, got {:?}", vw.shape())));
        }
        let (out_dim, in_dim) = (vw.shape()[0], vw.shape()[1]);
        let x_in = *vx.shape().last().ok_or_else(|| shape_err("linear", "input is scalar".into()))?;
        if x_in != in_dim {
            return Err(shape_err(
                "linear",
                format!("input last dim {x_in} != weight in dim {in_dim}"),
            ));
        }
        let rows = vx.numel() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        matmul_nt(vx.data(), rows, in_dim, vw.data(), out_dim, &mut out);
        if let Some(bv) = b {
            let vb = self.value(bv);
            if vb.shape() != [out_dim] {
                return Err(shape_err(
                    "linear",
                    format!("bias shape {:?} != [{out_dim}]", vb.shape()),
                ));
            }
            for row in out.chunks_exact_mut(out_dim) {
                for (o, bb) in row.iter_mut().zip(vb.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let t = Tensor::from_raw(shape, vx.dtype(), out);
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        self.push(t, needs, Op::Linear { x, w, b }, "linear")
    }

    /// Batched matmul. Leading dims of `a` and `b` must match exactly;
    /// with `transpose_b` the last two dims of `b` are [N, K] instead of [K, N].
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("bmm", format!("incompatible shapes {sa:?} x {sb:?}")));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (bk, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(shape_err("bmm", format!("inner dims {k} vs {bk}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &va.data()[i * m * k..(i + 1) * m * k];
            let bb = &vb.data()[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_nt(ab, m, k, bb, n, ob);
            } else {
                matmul_nn(ab, m, k, bb, n, ob);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let t = Tensor::from_raw(shape, va.dtype(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::Bmm { a, b, m, k, n, transpose_b }, "bmm")
    }

    // ── attention plumbing ─────────────────────────────────────────────

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[2] % heads != 0 {
            return Err(shape_err("split_heads", format!("shape {s:?}, heads {heads}")));
        }
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let dh = c / heads;
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..bsz {
            for t in 0..n {
                let row = &src[(b * n + t) * c..(b * n + t + 1) * c];
                for h in 0..heads {
                    let dst = ((b * heads + h) * n + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz, heads, n, dh], vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::SplitHeads { x, heads }, "split_heads")
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("merge_heads", format!("shape {s:?}")));
        }
        let (bsz, heads, n, dh) = (s[0], s[1], s[2], s[3]);
        let c = heads * dh;
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..bsz {
            for h in 0..heads {
                for t in 0..n {
                    let sidx = ((b * heads + h) * n + t) * dh;
                    let didx = (b * n + t) * c + h * dh;
                    out[didx..didx + dh].copy_from_slice(&src[sidx..sidx + dh]);
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz, n, c], vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::MergeHeads { x }, "merge_heads")
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = *vx.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::from_raw(vx.shape().to_vec(), vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::SoftmaxLast { x }, "softmax")
    }

    // ── normalization ──────────────────────────────────────────────────

    /// Per-vector normalization over the last axis followed by the affine
    /// gamma/beta. Population variance; `eps >= 0`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *vx.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs feature dim {c}", vg.shape(), vb.shape()),
            ));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let rows = vx.numel() / c;
        let mut out = vec![0.0; vx.numel()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        let (g, bta) = (vg.data(), vb.data());
        for (r, (xin, xout)) in vx.data().chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            let mean = xin.iter().sum::<f64>() / c as f64;
            let var = xin.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..c {
                xout[j] = (xin[j] - mean) * rstd * g[j] + bta[j];
            }
        }
        let t = Tensor::from_raw(vx.shape().to_vec(), vx.dtype(), out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            t,
            needs,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            "layer_norm",
        )
    }

    /// Batch normalization over (B, H, W) per channel. Train mode uses batch
    /// statistics and folds them into `state` with momentum [`BN_MOMENTUM`];
    /// eval mode requires `state.initialized`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("batch_norm", format!("want [B,C,H,W], got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if vg.shape() != [c] || vb.shape() != [c] || state.mean.len() != c {
            return Err(shape_err("batch_norm", format!("channel mismatch on {c} channels")));
        }
        let m = bsz * h * w;
        let plane = h * w;
        let (mean, rstd): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::BatchNorm(format!(
                        "train mode needs at least 2 values per channel, got {m}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..bsz {
                        let base = (b * c + ch) * plane;
                        acc += vx.data()[base..base + plane].iter().sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut vacc = 0.0;
                    for b in 0..bsz {
                        let base = (b * c + ch) * plane;
                        vacc += vx.data()[base..base + plane]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = vacc / m as f64;
                }
                for ch in 0..c {
                    state.mean[ch] = (1.0 - BN_MOMENTUM) * state.mean[ch] + BN_MOMENTUM * mean[ch];
                    state.var[ch] = (1.0 - BN_MOMENTUM) * state.var[ch] + BN_MOMENTUM * var[ch];
                }
                state.initialized = true;
                let rstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, rstd)
            }
            BnMode::Eval => {
                if !state.initialized {
                    return Err(Error::BatchNorm(
                        "eval mode before any running statistics exist".into(),
                    ));
                }
                let rstd = state.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (state.mean.clone(), rstd)
            }
        };
        let mut out = vec![0.0; vx.numel()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, rs, g, bb) = (mean[ch], rstd[ch], vg.data()[ch], vb.data()[ch]);
                for (o, xv) in out[base..base + plane].iter_mut().zip(&vx.data()[base..base + plane]) {
                    *o = (xv - mu) * rs * g + bb;
                }
            }
        }
        let t = Tensor::from_raw(s.to_vec(), vx.dtype(), out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            t,
            needs,
            Op::BatchNorm { x, gamma, beta, training: mode == BnMode::Train, mean, rstd },
            "batch_norm",
        )
    }

    // ── activations ────────────────────────────────────────────────────

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out: Vec<f64> = vx.data().iter().map(|&v| v * phi_cdf(v)).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::Gelu { x }, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out: Vec<f64> = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::Relu { x }, "relu")
    }

    // ── data movement ──────────────────────────────────────────────────

    /// Cut an image into non-overlapping p×p patches and flatten each to a
    /// row: [B,ch,H,W] -> [B, (H/p)·(W/p), ch·p²]. Within a patch the layout
    /// is channel-major, then rows, then columns.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("patchify", format!("want [B,ch,H,W], got {s:?}")));
        }
        let (bsz, ch, h, w) = (s[0], s[1], s[2], s[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(shape_err(
                "patchify",
                format!("image {h}x{w} not divisible by patch {patch}"),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let feat = ch * patch * patch;
        let mut out = vec![0.0; bsz * n * feat];
        let src = vx.data();
        for b in 0..bsz {
            for gy in 0..gh {
                for gx in 0..gw {
                    let dst = (b * n + gy * gw + gx) * feat;
                    for cc in 0..ch {
                        for py in 0..patch {
                            let srow = ((b * ch + cc) * h + gy * patch + py) * w + gx * patch;
                            let drow = dst + (cc * patch + py) * patch;
                            out[drow..drow + patch].copy_from_slice(&src[srow..srow + patch]);
                        }
                    }
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz, n, feat], vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::Patchify { x, patch }, "patchify")
    }

    /// [B,N,C] tokens to [B,C,gh,gw] feature maps (N must equal gh·gw).
    pub fn tokens_to_map(&mut self, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[1] != gh * gw {
            return Err(shape_err("tokens_to_map", format!("shape {s:?} vs grid {gh}x{gw}")));
        }
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..bsz {
            for t in 0..n {
                let row = &src[(b * n + t) * c..(b * n + t + 1) * c];
                for (cc, v) in row.iter().enumerate() {
                    out[(b * c + cc) * n + t] = *v;
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz, c, gh, gw], vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::TokensToMap { x, gh, gw }, "tokens_to_map")
    }

    /// Inverse of [`Tape::tokens_to_map`].
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("map_to_tokens", format!("want [B,C,H,W], got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = h * w;
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..bsz {
            for cc in 0..c {
                for t in 0..n {
                    out[(b * n + t) * c + cc] = src[(b * c + cc) * n + t];
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz, n, c], vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::MapToTokens { x }, "map_to_tokens")
    }

    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 || lo >= hi || hi > s[1] {
            return Err(shape_err("slice_channels", format!("range {lo}..{hi} on {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let sel = hi - lo;
        let mut out = vec![0.0; bsz * sel * plane];
        for b in 0..bsz {
            for cc in lo..hi {
                let src = (b * c + cc) * plane;
                let dst = (b * sel + (cc - lo)) * plane;
                out[dst..dst + plane].copy_from_slice(&vx.data()[src..src + plane]);
            }
        }
        let t = Tensor::from_raw(vec![bsz, sel, h, w], vx.dtype(), out);
        let needs = self.needs(x);
        self.push(t, needs, Op::SliceCh { x, lo, hi }, "slice_channels")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let (bsz, c1, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let c2 = sb[1];
        let plane = h * w;
        let c = c1 + c2;
        let mut out = vec![0.0; bsz * c * plane];
        for bi in 0..bsz {
            let dst = bi * c * plane;
            let sa0 = bi * c1 * plane;
            let sb0 = bi * c2 * plane;
            out[dst..dst + c1 * plane].copy_from_slice(&va.data()[sa0..sa0 + c1 * plane]);
            out[dst + c1 * plane..dst + c * plane].copy_from_slice(&vb.data()[sb0..sb0 + c2 * plane]);
        }
        let t = Tensor::from_raw(vec![bsz, c, h, w], va.dtype(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::ConcatCh { a, b }, "concat_channels")
    }

    // ── convolutions ───────────────────────────────────────────────────

    /// Per-channel 3×3 cross-correlation with zero padding 1 and stride 1.
    /// No channel mixing; kernel is [C,3,3], bias [C].
    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (vx, vk, vb) = (self.value(x), self.value(kernel), self.value(bias));
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("depthwise_conv3x3", format!("want [B,C,H,W], got {s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if vk.shape() != [c, 3, 3] || vb.shape() != [c] {
            return Err(shape_err(
                "depthwise_conv3x3",
                format!("kernel {:?} / bias {:?} vs {c} channels", vk.shape(), vb.shape()),
            ));
        }
        let plane = h * w;
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let k = &vk.data()[ch * 9..ch * 9 + 9];
                let bb = vb.data()[ch];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bb;
                        for dy in 0..3usize {
                            let yy = y as isize + dy as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let xxx = xx as isize + dx as isize - 1;
                                if xxx < 0 || xxx >= w as isize {
                                    continue;
                                }
                                acc += k[dy * 3 + dx] * src[base + yy as usize * w + xxx as usize];
                            }
                        }
                        out[base + y * w + xx] = acc;
                    }
                }
            }
        }
        let t = Tensor::from_raw(s.to_vec(), vx.dtype(), out);
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        self.push(t, needs, Op::DwConv3x3 { x, kernel, bias }, "depthwise_conv3x3")
    }

    /// Per-pixel linear map across channels: weight [Cout,Cin], bias [Cout].
    pub fn pointwise_conv1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("pointwise_conv1x1", format!("want [B,C,H,W], got {s:?}")));
        }
        let (bsz, cin, h, w) = (s[0], s[1], s[2], s[3]);
        if vw.shape().len() != 2 || vw.shape()[1] != cin {
            return Err(shape_err(
                "pointwise_conv1x1",
                format!("weight {:?} vs Cin {cin}", vw.shape()),
            ));
        }
        let cout = vw.shape()[0];
        if vb.shape() != [cout] {
            return Err(shape_err("pointwise_conv1x1", format!("bias {:?}", vb.shape())));
        }
        let plane = h * w;
        let mut out = vec![0.0; bsz * cout * plane];
        for b in 0..bsz {
            let xb = &vx.data()[b * cin * plane..(b + 1) * cin * plane];
            let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
            matmul_nn(vw.data(), cout, cin, xb, plane, ob);
            for (co, orow) in ob.chunks_exact_mut(plane).enumerate() {
                let bb = vb.data()[co];
                for o in orow.iter_mut() {
                    *o += bb;
                }
            }
        }
        let t = Tensor::from_raw(vec![bsz, cout, h, w], vx.dtype(), out);
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        self.push(t, needs, Op::PwConv1x1 { x, weight, bias }, "pointwise_conv1x1")
    }

    // ── reductions / loss ──────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::scalar(vx.data().iter().sum());
        let needs = self.needs(x);
        self.push(t, needs, Op::Sum { x }, "sum")
    }

    /// Mean token-wise cross-entropy with softmax. `logits` has shape
    /// [..., K] and `labels` one entry per leading row, each in [0, K).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let k = *vl.shape().last().ok_or_else(|| shape_err("cross_entropy", "scalar logits".into()))?;
        let rows = vl.numel() / k;
        if labels.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            loss -= row[label].ln();
        }
        loss /= rows as f64;
        let t = Tensor::scalar(loss);
        let needs = self.needs(logits);
        self.push(
            t,
            needs,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            "cross_entropy",
        )
    }

    // ── reverse sweep ──────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// reachable leaf that requires gradients. Leaves the loss does not
    /// depend on are absent from the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lnode = &self.nodes[loss.0];
        if !lnode.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                lnode.value.shape()
            )));
        }
        if !lnode.needs_grad {
            return Err(Error::Autodiff(
                "loss is not reachable from any gradient-requiring leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Autodiff(format!(
                    "non-finite gradient encountered during replay at node {id}"
                )));
            }
            if let Op::Leaf = self.nodes[id].op {
                grads[id] = Some(g); // keep for collection
                continue;
            }
            self.accumulate_inputs(id, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (id, slot) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (slot, &self.nodes[id].op) {
                if self.nodes[id].needs_grad {
                    let shape = self.nodes[id].value.shape().to_vec();
                    let dtype = self.nodes[id].value.dtype();
                    out.by_node.insert(id, Tensor::from_raw(shape, dtype, g));
                }
            }
        }
        Ok(out)
    }

    fn accumulate_inputs(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        // Helper: lazily materialize the gradient buffer of `v`.
        macro_rules! buf {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; self.nodes[$v.0].value.numel()])
            };
        }
        macro_rules! wants {
            ($v:expr) => {
                self.nodes[$v.0].needs_grad
            };
        }
        match &node.op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Add { a, b } => {
                if wants!(a) {
                    let ga = buf!(a);
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if wants!(b) {
                    let bn = self.nodes[b.0].value.numel();
                    let gb = buf!(b);
                    for chunk in g.chunks_exact(bn) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let bn = vb.len();
                if wants!(a) {
                    let ga = buf!(a);
                    for (i, (o, v)) in ga.iter_mut().zip(g).enumerate() {
                        *o += v * vb[i % bn];
                    }
                }
                if wants!(b) {
                    let gb = buf!(b);
                    for (chunk, achunk) in g.chunks_exact(bn).zip(va.chunks_exact(bn)) {
                        for ((o, v), av) in gb.iter_mut().zip(chunk).zip(achunk) {
                            *o += v * av;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if wants!(a) {
                    let ga = buf!(a);
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v * c;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (out_dim, in_dim) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / in_dim;
                if wants!(x) {
                    let gx = buf!(x);
                    matmul_nn_acc(g, rows, out_dim, vw.data(), in_dim, gx);
                }
                if wants!(w) {
                    let gw = buf!(w);
                    matmul_tn_acc(g, rows, out_dim, vx.data(), in_dim, gw);
                }
                if let Some(bv) = b {
                    if wants!(bv) {
                        let gb = buf!(bv);
                        for row in g.chunks_exact(out_dim) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, m, k, n, transpose_b } => {
                let (m, k, n) = (*m, *k, *n);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let batch = va.numel() / (m * k);
                if wants!(a) {
                    let ga = buf!(a);
                    for i in 0..batch {
                        let gb_ = &g[i * m * n..(i + 1) * m * n];
                        let bb = &vb.data()[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // out = A·Bᵀ with B [n,k]: dA = g·B
                            matmul_nn_acc(gb_, m, n, bb, k, dst);
                        } else {
                            // dA = g·Bᵀ with B [k,n]
                            matmul_nt_acc(gb_, m, n, bb, k, dst);
                        }
                    }
                }
                if wants!(b) {
                    let gbuf = buf!(b);
                    for i in 0..batch {
                        let gb_ = &g[i * m * n..(i + 1) * m * n];
                        let ab = &va.data()[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // dB [n,k] = gᵀ·A
                            let dst = &mut gbuf[i * n * k..(i + 1) * n * k];
                            matmul_tn_acc(gb_, m, n, ab, k, dst);
                        } else {
                            // dB [k,n] = Aᵀ·g
                            let dst = &mut gbuf[i * k * n..(i + 1) * k * n];
                            matmul_tn_acc(ab, m, k, gb_, n, dst);
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if wants!(x) {
                    let s = self.nodes[id].value.shape().to_vec(); // [B,h,N,dh]
                    let (bsz, h, n, dh) = (s[0], s[1], s[2], s[3]);
                    let c = h * dh;
                    let _ = heads;
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for hh in 0..h {
                            for t in 0..n {
                                let sidx = ((b * h + hh) * n + t) * dh;
                                let didx = (b * n + t) * c + hh * dh;
                                for j in 0..dh {
                                    gx[didx + j] += g[sidx + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x } => {
                if wants!(x) {
                    let s = self.nodes[x.0].value.shape().to_vec(); // [B,h,N,dh]
                    let (bsz, h, n, dh) = (s[0], s[1], s[2], s[3]);
                    let c = h * dh;
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for hh in 0..h {
                            for t in 0..n {
                                let didx = ((b * h + hh) * n + t) * dh;
                                let sidx = (b * n + t) * c + hh * dh;
                                for j in 0..dh {
                                    gx[didx + j] += g[sidx + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if wants!(x) {
                    let y = self.nodes[id].value.data();
                    let c = *self.nodes[id].value.shape().last().unwrap();
                    let gx = buf!(x);
                    for ((grow, yrow), xrow) in
                        g.chunks_exact(c).zip(y.chunks_exact(c)).zip(gx.chunks_exact_mut(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in xrow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gamma.0].value.data();
                let c = vg.len();
                if wants!(gamma) {
                    let gg = buf!(gamma);
                    for (r, (grow, xrow)) in g.chunks_exact(c).zip(vx.chunks_exact(c)).enumerate() {
                        let (mu, rs) = (mean[r], rstd[r]);
                        for j in 0..c {
                            gg[j] += grow[j] * (xrow[j] - mu) * rs;
                        }
                    }
                }
                if wants!(beta) {
                    let gb = buf!(beta);
                    for grow in g.chunks_exact(c) {
                        for (o, v) in gb.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
                if wants!(x) {
                    let gx = buf!(x);
                    for (r, ((grow, xrow), dst)) in g
                        .chunks_exact(c)
                        .zip(vx.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dyg = grow[j] * vg[j];
                            let xhat = (xrow[j] - mu) * rs;
                            m1 += dyg;
                            m2 += dyg * xhat;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dyg = grow[j] * vg[j];
                            let xhat = (xrow[j] - mu) * rs;
                            dst[j] += rs * (dyg - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if wants!(x) {
                    let vx = self.nodes[x.0].value.data();
                    let gx = buf!(x);
                    for ((o, v), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += v * (phi_cdf(*xv) + xv * phi_pdf(*xv));
                    }
                }
            }
            Op::Relu { x } => {
                if wants!(x) {
                    let vx = self.nodes[x.0].value.data();
                    let gx = buf!(x);
                    for ((o, v), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Patchify { x, patch } => {
                if wants!(x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (bsz, ch, h, w) = (s[0], s[1], s[2], s[3]);
                    let p = *patch;
                    let (gh, gw) = (h / p, w / p);
                    let n = gh * gw;
                    let feat = ch * p * p;
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for gy in 0..gh {
                            for gxx in 0..gw {
                                let srow0 = (b * n + gy * gw + gxx) * feat;
                                for cc in 0..ch {
                                    for py in 0..p {
                                        let drow = ((b * ch + cc) * h + gy * p + py) * w + gxx * p;
                                        let srow = srow0 + (cc * p + py) * p;
                                        for px in 0..p {
                                            gx[drow + px] += g[srow + px];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::TokensToMap { x, gh, gw } => {
                if wants!(x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (bsz, n, c) = (s[0], s[1], s[2]);
                    let _ = (gh, gw);
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for t in 0..n {
                            for cc in 0..c {
                                gx[(b * n + t) * c + cc] += g[(b * c + cc) * n + t];
                            }
                        }
                    }
                }
            }
            Op::MapToTokens { x } => {
                if wants!(x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let n = h * w;
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for cc in 0..c {
                            for t in 0..n {
                                gx[(b * c + cc) * n + t] += g[(b * n + t) * c + cc];
                            }
                        }
                    }
                }
            }
            Op::SliceCh { x, lo, hi } => {
                if wants!(x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let plane = h * w;
                    let sel = hi - lo;
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for cc in *lo..*hi {
                            let dst = (b * c + cc) * plane;
                            let src = (b * sel + (cc - lo)) * plane;
                            for j in 0..plane {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatCh { a, b } => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (bsz, c1, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let c2 = sb[1];
                let plane = h * w;
                let c = c1 + c2;
                if wants!(a) {
                    let ga = buf!(a);
                    for bi in 0..bsz {
                        let src = bi * c * plane;
                        let dst = bi * c1 * plane;
                        for j in 0..c1 * plane {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
                if wants!(b) {
                    let gb = buf!(b);
                    for bi in 0..bsz {
                        let src = bi * c * plane + c1 * plane;
                        let dst = bi * c2 * plane;
                        for j in 0..c2 * plane {
                            gb[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::DwConv3x3 { x, kernel, bias } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                let vx = self.nodes[x.0].value.data();
                let vk = self.nodes[kernel.0].value.data();
                if wants!(x) {
                    let gx = buf!(x);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let k = &vk[ch * 9..ch * 9 + 9];
                            for y in 0..h as isize {
                                for xx in 0..w as isize {
                                    let gv = g[base + (y as usize) * w + xx as usize];
                                    for dy in -1..=1isize {
                                        let yy = y + dy;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        for dx in -1..=1isize {
                                            let xxx = xx + dx;
                                            if xxx < 0 || xxx >= w as isize {
                                                continue;
                                            }
                                            gx[base + yy as usize * w + xxx as usize] +=
                                                gv * k[(dy + 1) as usize * 3 + (dx + 1) as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wants!(kernel) {
                    let gk = buf!(kernel);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for y in 0..h as isize {
                                for xx in 0..w as isize {
                                    let gv = g[base + (y as usize) * w + xx as usize];
                                    for dy in -1..=1isize {
                                        let yy = y + dy;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        for dx in -1..=1isize {
                                            let xxx = xx + dx;
                                            if xxx < 0 || xxx >= w as isize {
                                                continue;
                                            }
                                            gk[ch * 9 + (dy + 1) as usize * 3 + (dx + 1) as usize] +=
                                                gv * vx[base + yy as usize * w + xxx as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wants!(bias) {
                    let gb = buf!(bias);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            gb[ch] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::PwConv1x1 { x, weight, bias } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (bsz, cin, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                let vw = &self.nodes[weight.0].value;
                let cout = vw.shape()[0];
                let vx = self.nodes[x.0].value.data();
                if wants!(x) {
                    let gx = buf!(x);
                    for b in 0..bsz {
                        let gb_ = &g[b * cout * plane..(b + 1) * cout * plane];
                        let dst = &mut gx[b * cin * plane..(b + 1) * cin * plane];
                        // dX = Wᵀ·G
                        matmul_tn_acc(vw.data(), cout, cin, gb_, plane, dst);
                    }
                }
                if wants!(weight) {
                    let gw = buf!(weight);
                    for b in 0..bsz {
                        let gb_ = &g[b * cout * plane..(b + 1) * cout * plane];
                        let xb = &vx[b * cin * plane..(b + 1) * cin * plane];
                        // dW = G·Xᵀ
                        matmul_nt_acc(gb_, cout, plane, xb, cin, gw);
                    }
                }
                if wants!(bias) {
                    let gb = buf!(bias);
                    for b in 0..bsz {
                        for co in 0..cout {
                            let base = (b * cout + co) * plane;
                            gb[co] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, training, mean, rstd } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                let m = (bsz * plane) as f64;
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gamma.0].value.data();
                if wants!(gamma) {
                    let gg = buf!(gamma);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let (mu, rs) = (mean[ch], rstd[ch]);
                            let mut acc = 0.0;
                            for j in 0..plane {
                                acc += g[base + j] * (vx[base + j] - mu) * rs;
                            }
                            gg[ch] += acc;
                        }
                    }
                }
                if wants!(beta) {
                    let gb = buf!(beta);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            gb[ch] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
                if wants!(x) {
                    let gx = buf!(x);
                    if *training {
                        for ch in 0..c {
                            let (mu, rs, gam) = (mean[ch], rstd[ch], vg[ch]);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for b in 0..bsz {
                                let base = (b * c + ch) * plane;
                                for j in 0..plane {
                                    let dyg = g[base + j] * gam;
                                    let xhat = (vx[base + j] - mu) * rs;
                                    m1 += dyg;
                                    m2 += dyg * xhat;
                                }
                            }
                            m1 /= m;
                            m2 /= m;
                            for b in 0..bsz {
                                let base = (b * c + ch) * plane;
                                for j in 0..plane {
                                    let dyg = g[base + j] * gam;
                                    let xhat = (vx[base + j] - mu) * rs;
                                    gx[base + j] += rs * (dyg - m1 - xhat * m2);
                                }
                            }
                        }
                    } else {
                        for b in 0..bsz {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let f = vg[ch] * rstd[ch];
                                for j in 0..plane {
                                    gx[base + j] += g[base + j] * f;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants!(logits) {
                    let k = *self.nodes[logits.0].value.shape().last().unwrap();
                    let rows = labels.len();
                    let scale = g[0] / rows as f64;
                    let gl = buf!(logits);
                    for (r, (dst, prow)) in
                        gl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate()
                    {
                        for (j, (o, p)) in dst.iter_mut().zip(prow).enumerate() {
                            let ind = if j == labels[r] { 1.0 } else { 0.0 };
                            *o += scale * (p - ind);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants!(x) {
                    let gx = buf!(x);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn suffix_check(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(shape_err(op, format!("{b:?} is not a suffix of {a:?}")))
    }
}

/// Standard normal CDF, used by exact gelu.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// ── dense kernels ────────────────────────────────────────────────────────
//
// Two inner-loop shapes cover every matmul here: a dot product of two
// contiguous rows (with split accumulators so the reduction vectorizes)
// and an axpy over a contiguous row.

#[inline]
fn transpose_into(a: &[f64], rows: usize, cols: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(a.len(), 0.0);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

#[inline]
fn axpy(s: f64, v: &[f64], out: &mut [f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += s * x;
    }
}

/// out[m,n] = x[m,k] · w[n,k]ᵀ (overwrites out).
fn matmul_nt(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    // One transpose turns the inner loop into contiguous axpy updates,
    // which vectorize; the dot form is FMA-latency-bound.
    let mut wt = Vec::new();
    transpose_into(w, n, k, &mut wt);
    out.fill(0.0);
    matmul_nn_acc(x, m, k, &wt, n, out);
}

/// out[m,n] += x[m,k] · w[n,k]ᵀ.
fn matmul_nt_acc(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut wt = Vec::new();
    transpose_into(w, n, k, &mut wt);
    matmul_nn_acc(x, m, k, &wt, n, out);
}

/// out[m,n] = a[m,k] · b[k,n] (overwrites out).
fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    matmul_nn_acc(a, m, k, b, n, out);
}

/// out[m,n] += a[m,k] · b[k,n].
fn matmul_nn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (s, brow) in arow.iter().zip(b.chunks_exact(n)) {
            axpy(*s, brow, orow);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n].
fn matmul_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (s, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            axpy(*s, brow, orow);
        }
    }
}
