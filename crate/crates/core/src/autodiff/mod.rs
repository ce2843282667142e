//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Tensors are flat row-major `f32` buffers owned by a [`Tape`] arena and
//! addressed by [`TensorId`]. Recording an op computes its forward value
//! immediately; [`Tape::backward`] replays the ops in strict reverse
//! creation order (which is reverse topological order, since an op can only
//! consume already-existing tensors) and accumulates gradients into every
//! tensor marked `requires_grad`. A tape and its tensors belong to one
//! thread; parallelism lives inside the kernels and across independent
//! tapes.

pub mod adam;
pub mod checkpoint;
pub mod kernels;

pub use adam::{Adam, AdamConfig};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::fm;
use kernels::Exec;

pub type TensorId = usize;

/// The only numeric container in the pipeline.
#[derive(Debug, Clone)]
pub struct Tensor {
    /// Contiguous row-major values.
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// Populated by `backward` for tensors that require grad.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter outside any tape; training loads it onto a fresh tape
/// each step and applies updates back to `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param data/shape mismatch");
        Param { data, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param { data: vec![0.0; n], shape }
    }
}

/// Ordered name → parameter map; iteration order is the name order, which
/// makes checkpoints and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) {
        self.params.insert(name.into(), p);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamSet, prefix: &str) {
        for (name, p) in other.params.iter() {
            if name.starts_with(prefix) {
                self.params.insert(name.clone(), p.clone());
            }
        }
    }
}

/// Gradients pulled off a tape, keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f32>>;

/// Adds `from` into `into`, allocating missing entries (gradient
/// accumulation across micro-batches).
pub fn accumulate_grads(into: &mut GradMap, from: GradMap) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                assert_eq!(acc.len(), g.len(), "gradient length changed between accumulations");
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

// ── Op payloads ──────────────────────────────────────────────────────────

/// Point features for one occupied BEV cell.
#[derive(Debug, Clone)]
pub struct PillarGroup {
    /// Flat row index `row * nx + col` of the cell this pillar fills.
    pub cell: usize,
    /// `n_pts × in_dim` point feature rows.
    pub feats: Vec<f32>,
}

/// Constant side of the pillar-embed op: the binned points.
#[derive(Debug, Clone)]
pub struct PillarBatch {
    pub in_dim: usize,
    pub ny: usize,
    pub nx: usize,
    pub groups: Vec<PillarGroup>,
}

/// One bilinear sample: four source taps (index into `h_in*w_in`, weight).
#[derive(Debug, Clone, Copy, Default)]
pub struct WarpTap {
    pub idx: [u32; 4],
    pub wgt: [f32; 4],
}

/// Precomputed bilinear resampling plan shared by all channels.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// `h_out * w_out` taps in row-major target order.
    pub taps: Vec<WarpTap>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    Deconv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    Relu { x: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    ConcatCh { a: TensorId, b: TensorId },
    Affine { x: TensorId, mul: f32 },
    Add { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    WeightedSum { x: TensorId, weights: Vec<f32> },
    CosineSim { a: TensorId, b: TensorId, dot: f64, na: f64, nb: f64 },
    L1Norm { x: TensorId },
    L2Norm { x: TensorId, norm: f64 },
    RescaleL1 { x: TensorId, reference: TensorId, lx: f64, lref: f64 },
    PillarEmbed { w: TensorId, b: TensorId, batch: PillarBatch, argmax: Vec<i32> },
    WarpBev { x: TensorId, plan: WarpPlan },
    FocalBce { x: TensorId, pos: Vec<u32>, neg: Vec<u32>, alpha: f64, gamma: f64, inv_norm: f64 },
    SmoothL1 { x: TensorId, idx: Vec<u32>, target: Vec<f32>, weight: Vec<f32>, inv_norm: f64 },
}

// ── Numerically stable scalar helpers ────────────────────────────────────

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        fm::exp(x)
    } else {
        fm::ln(1.0 + fm::exp(x))
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fm::exp(-x))
    } else {
        let e = fm::exp(x);
        e / (1.0 + e)
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────

pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    backward_done: bool,
    conv_ops: usize,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), ops: Vec::new(), backward_done: false, conv_ops: 0, exec: Exec::Auto }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { exec, ..Self::new() }
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.push(Tensor { data, shape, requires_grad, grad: None });
        self.ops.push(op);
        self.tensors.len() - 1
    }

    /// Registers a leaf tensor.
    pub fn tensor(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<TensorId> {
        self.tensor(data, shape, false)
    }

    /// Loads a named parameter's current value onto the tape.
    pub fn load_param(&mut self, p: &Param, requires_grad: bool) -> TensorId {
        self.push(p.data.clone(), p.shape.clone(), requires_grad, Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.tensors[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id].requires_grad
    }

    /// Gradient buffer of `id`, present after `backward` if it requires grad
    /// and the loss reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.tensors[id].grad.as_deref()
    }

    /// Scalar read of a `[1]` tensor.
    pub fn value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.tensors[id].numel(), 1);
        self.tensors[id].data[0]
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Number of conv2d/deconv2d ops recorded so far. The latency-
    /// compensation path asserts this stays flat across prediction.
    pub fn conv_op_count(&self) -> usize {
        self.conv_ops
    }

    fn rank3(&self, id: TensorId, what: &str) -> Result<(usize, usize, usize)> {
        match *self.tensors[id].shape {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::dim(format!("{what} must be rank 3, got {s:?}"))),
        }
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    /// 2-D cross-correlation, `x:[ci,h,w] ⋆ w:[co,ci,kh,kw] + b:[co]`.
    /// Kernel sides must be odd; output spatial size must stay positive.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (ci, h, wd) = self.rank3(x, "conv2d input")?;
        let (co, ci_w, kh, kw) = match *self.tensors[w].shape {
            [co, ci_w, kh, kw] => (co, ci_w, kh, kw),
            ref s => return Err(Error::dim(format!("conv2d weight must be rank 4, got {s:?}"))),
        };
        if ci_w != ci {
            return Err(Error::dim(format!("conv2d channels: input has {ci}, weight expects {ci_w}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel sides must be odd, got {kh}x{kw}")));
        }
        if self.tensors[b].shape != [co] {
            return Err(Error::dim("conv2d bias must be [c_out]".to_string()));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be >= 1".to_string()));
        }
        let oh = kernels::conv_out_len(h, kh, stride, pad)
            .ok_or_else(|| Error::dim(format!("conv2d output height collapses for h={h}, k={kh}")))?;
        let ow = kernels::conv_out_len(wd, kw, stride, pad)
            .ok_or_else(|| Error::dim(format!("conv2d output width collapses for w={wd}, k={kw}")))?;
        let mut out = vec![0.0; co * oh * ow];
        kernels::conv2d_forward(
            self.exec,
            &self.tensors[x].data,
            ci,
            h,
            wd,
            &self.tensors[w].data,
            kh,
            kw,
            &self.tensors[b].data,
            stride,
            pad,
            &mut out,
            oh,
            ow,
        );
        self.conv_ops += 1;
        let rg = self.tensors[x].requires_grad || self.tensors[w].requires_grad || self.tensors[b].requires_grad;
        Ok(self.push(out, vec![co, oh, ow], rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution, exact adjoint of [`Tape::conv2d`] for the
    /// same weight. Weight layout `[ci, co, kh, kw]`; even kernels are
    /// allowed (they are what restores even sizes at stride 2).
    pub fn deconv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (ci, h, wd) = self.rank3(x, "deconv2d input")?;
        let (ci_w, co, kh, kw) = match *self.tensors[w].shape {
            [ci_w, co, kh, kw] => (ci_w, co, kh, kw),
            ref s => return Err(Error::dim(format!("deconv2d weight must be rank 4, got {s:?}"))),
        };
        if ci_w != ci {
            return Err(Error::dim(format!("deconv2d channels: input has {ci}, weight expects {ci_w}")));
        }
        if self.tensors[b].shape != [co] {
            return Err(Error::dim("deconv2d bias must be [c_out]".to_string()));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::dim("deconv2d stride and kernel must be >= 1".to_string()));
        }
        let oh = kernels::deconv_out_len(h, kh, stride, pad)
            .ok_or_else(|| Error::dim(format!("deconv2d output height collapses for h={h}, k={kh}")))?;
        let ow = kernels::deconv_out_len(wd, kw, stride, pad)
            .ok_or_else(|| Error::dim(format!("deconv2d output width collapses for w={wd}, k={kw}")))?;
        let mut out = vec![0.0; co * oh * ow];
        kernels::deconv2d_forward(
            self.exec,
            &self.tensors[x].data,
            ci,
            h,
            wd,
            &self.tensors[w].data,
            co,
            kh,
            kw,
            &self.tensors[b].data,
            stride,
            pad,
            &mut out,
            oh,
            ow,
        );
        self.conv_ops += 1;
        let rg = self.tensors[x].requires_grad || self.tensors[w].requires_grad || self.tensors[b].requires_grad;
        Ok(self.push(out, vec![co, oh, ow], rg, Op::Deconv2d { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let t = &self.tensors[x];
        let out: Vec<f32> = t.data.iter().map(|&v| v.max(0.0)).collect();
        let (shape, rg) = (t.shape.clone(), t.requires_grad);
        Ok(self.push(out, shape, rg, Op::Relu { x }))
    }

    /// `x:[n] → [m]` or `x:[rows,n] → [rows,m]` with `w:[m,n] + b:[m]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (rows, n, rank1) = match *self.tensors[x].shape {
            [n] => (1, n, true),
            [rows, n] => (rows, n, false),
            ref s => return Err(Error::dim(format!("linear input must be rank 1 or 2, got {s:?}"))),
        };
        let (m, n_w) = match *self.tensors[w].shape {
            [m, n_w] => (m, n_w),
            ref s => return Err(Error::dim(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if n_w != n {
            return Err(Error::dim(format!("linear inner dims: input {n}, weight {n_w}")));
        }
        if self.tensors[b].shape != [m] {
            return Err(Error::dim("linear bias must be [m]".to_string()));
        }
        let mut out = vec![0.0; rows * m];
        kernels::linear_forward(&self.tensors[x].data, rows, n, &self.tensors[w].data, m, &self.tensors[b].data, &mut out);
        let rg = self.tensors[x].requires_grad || self.tensors[w].requires_grad || self.tensors[b].requires_grad;
        let shape = if rank1 { vec![m] } else { vec![rows, m] };
        Ok(self.push(out, shape, rg, Op::Linear { x, w, b }))
    }

    /// Stacks two `[c,h,w]` maps along channels; spatial dims must match.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ca, ha, wa) = self.rank3(a, "concat lhs")?;
        let (cb, hb, wb) = self.rank3(b, "concat rhs")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::dim(format!(
                "concat spatial dims differ: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(&self.tensors[a].data);
        out.extend_from_slice(&self.tensors[b].data);
        let rg = self.tensors[a].requires_grad || self.tensors[b].requires_grad;
        Ok(self.push(out, vec![ca + cb, ha, wa], rg, Op::ConcatCh { a, b }))
    }

    /// Elementwise `mul·x + add`. With `add == 0` the result of `mul == 1`
    /// is bitwise `x`.
    pub fn affine(&mut self, x: TensorId, mul: f32, add: f32) -> Result<TensorId> {
        let t = &self.tensors[x];
        let out: Vec<f32> = if add == 0.0 {
            t.data.iter().map(|&v| v * mul).collect()
        } else {
            t.data.iter().map(|&v| v * mul + add).collect()
        };
        let (shape, rg) = (t.shape.clone(), t.requires_grad);
        Ok(self.push(out, shape, rg, Op::Affine { x, mul }))
    }

    /// Multiplication by a scalar.
    pub fn scale(&mut self, x: TensorId, s: f32) -> Result<TensorId> {
        self.affine(x, s, 0.0)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.tensors[a].shape != self.tensors[b].shape {
            return Err(Error::dim(format!(
                "add shapes differ: {:?} vs {:?}",
                self.tensors[a].shape, self.tensors[b].shape
            )));
        }
        let out: Vec<f32> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&u, &v)| u + v)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.tensors[a].requires_grad || self.tensors[b].requires_grad;
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let acc: f64 = self.tensors[x].data.iter().map(|&v| v as f64).sum();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(vec![acc as f32], vec![1], rg, Op::Sum { x }))
    }

    /// `Σ weights[i]·x[i]` with constant weights, as a `[1]` tensor.
    pub fn weighted_sum(&mut self, x: TensorId, weights: Vec<f32>) -> Result<TensorId> {
        if weights.len() != self.tensors[x].numel() {
            return Err(Error::dim("weighted_sum weight length mismatch".to_string()));
        }
        let acc: f64 = self.tensors[x]
            .data
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(vec![acc as f32], vec![1], rg, Op::WeightedSum { x, weights }))
    }

    /// Cosine similarity of two same-shape tensors, as a `[1]` tensor.
    /// Errors if either input has zero norm.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.tensors[a].shape != self.tensors[b].shape {
            return Err(Error::dim("cosine_similarity shapes differ".to_string()));
        }
        let mut dot = 0.0f64;
        let mut qa = 0.0f64;
        let mut qb = 0.0f64;
        for (&u, &v) in self.tensors[a].data.iter().zip(&self.tensors[b].data) {
            let (u, v) = (u as f64, v as f64);
            dot += u * v;
            qa += u * u;
            qb += v * v;
        }
        let (na, nb) = (fm::sqrt(qa), fm::sqrt(qb));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::degenerate("cosine_similarity of a zero-norm tensor"));
        }
        let cosv = (dot / (na * nb)) as f32;
        let rg = self.tensors[a].requires_grad || self.tensors[b].requires_grad;
        Ok(self.push(vec![cosv], vec![1], rg, Op::CosineSim { a, b, dot, na, nb }))
    }

    /// `Σ|x|` as a `[1]` tensor.
    pub fn l1_norm(&mut self, x: TensorId) -> Result<TensorId> {
        let acc: f64 = self.tensors[x].data.iter().map(|&v| (v as f64).abs()).sum();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(vec![acc as f32], vec![1], rg, Op::L1Norm { x }))
    }

    /// Euclidean norm as a `[1]` tensor.
    pub fn l2_norm(&mut self, x: TensorId) -> Result<TensorId> {
        let acc: f64 = self.tensors[x].data.iter().map(|&v| v as f64 * v as f64).sum();
        let norm = fm::sqrt(acc);
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(vec![norm as f32], vec![1], rg, Op::L2Norm { x, norm }))
    }

    /// Rescales `x` so its L1 norm matches `reference`'s:
    /// `out = x · (‖reference‖₁ / ‖x‖₁)`. Errors when `x` has zero norm.
    pub fn rescale_l1(&mut self, x: TensorId, reference: TensorId) -> Result<TensorId> {
        if self.tensors[x].numel() != self.tensors[reference].numel() {
            return Err(Error::dim("rescale_l1 operand sizes differ".to_string()));
        }
        let lx: f64 = self.tensors[x].data.iter().map(|&v| (v as f64).abs()).sum();
        let lref: f64 = self.tensors[reference].data.iter().map(|&v| (v as f64).abs()).sum();
        if lx == 0.0 {
            return Err(Error::degenerate("rescale_l1: zero-norm input cannot be rescaled"));
        }
        let factor = (lref / lx) as f32;
        let out: Vec<f32> = self.tensors[x].data.iter().map(|&v| v * factor).collect();
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad || self.tensors[reference].requires_grad;
        Ok(self.push(out, shape, rg, Op::RescaleL1 { x, reference, lx, lref }))
    }

    /// Per-pillar `max_j relu(W·f_j + b)` scattered into a `[C,ny,nx]`
    /// pseudo-image. Point features are constants; gradients flow to `w`
    /// and `b` through each pillar's winning point.
    pub fn pillar_embed(&mut self, w: TensorId, b: TensorId, batch: PillarBatch) -> Result<TensorId> {
        let (c_n, in_dim) = match *self.tensors[w].shape {
            [c, d] => (c, d),
            ref s => return Err(Error::dim(format!("pillar_embed weight must be rank 2, got {s:?}"))),
        };
        if in_dim != batch.in_dim {
            return Err(Error::dim(format!(
                "pillar_embed feature width {} does not match weight {}",
                batch.in_dim, in_dim
            )));
        }
        if self.tensors[b].shape != [c_n] {
            return Err(Error::dim("pillar_embed bias must be [channels]".to_string()));
        }
        let spatial = batch.ny * batch.nx;
        let mut seen = vec![false; spatial];
        for g in &batch.groups {
            if g.cell >= spatial {
                return Err(Error::dim(format!("pillar cell {} outside {}x{} grid", g.cell, batch.ny, batch.nx)));
            }
            if g.feats.is_empty() || g.feats.len() % in_dim != 0 {
                return Err(Error::dim("pillar group feature rows malformed".to_string()));
            }
            if std::mem::replace(&mut seen[g.cell], true) {
                return Err(Error::usage(format!("two pillar groups claim cell {}", g.cell)));
            }
        }
        let wdata = &self.tensors[w].data;
        let bdata = &self.tensors[b].data;
        // Max over points commutes with relu (both monotone), so take the
        // preactivation max and clamp once.
        let per_group: Vec<(Vec<f32>, Vec<i32>)> = crate::par::map_indexed(batch.groups.len(), |gi| {
            let g = &batch.groups[gi];
            let n_pts = g.feats.len() / in_dim;
            let mut vals = vec![0.0f32; c_n];
            let mut arg = vec![-1i32; c_n];
            for c in 0..c_n {
                let w_row = &wdata[c * in_dim..][..in_dim];
                let mut best = f32::NEG_INFINITY;
                let mut best_i = -1i32;
                for p in 0..n_pts {
                    let row = &g.feats[p * in_dim..][..in_dim];
                    let mut acc = bdata[c];
                    for d in 0..in_dim {
                        acc += w_row[d] * row[d];
                    }
                    if acc > best {
                        best = acc;
                        best_i = p as i32;
                    }
                }
                if best > 0.0 {
                    vals[c] = best;
                    arg[c] = best_i;
                }
            }
            (vals, arg)
        });
        let mut out = vec![0.0f32; c_n * spatial];
        let mut argmax = vec![-1i32; batch.groups.len() * c_n];
        for (gi, (vals, arg)) in per_group.into_iter().enumerate() {
            let cell = batch.groups[gi].cell;
            for c in 0..c_n {
                out[c * spatial + cell] = vals[c];
            }
            argmax[gi * c_n..(gi + 1) * c_n].copy_from_slice(&arg);
        }
        let rg = self.tensors[w].requires_grad || self.tensors[b].requires_grad;
        let (ny, nx) = (batch.ny, batch.nx);
        Ok(self.push(out, vec![c_n, ny, nx], rg, Op::PillarEmbed { w, b, batch, argmax }))
    }

    /// Bilinear resample of every channel through a precomputed plan.
    pub fn warp_bev(&mut self, x: TensorId, plan: WarpPlan) -> Result<TensorId> {
        let (c, h, w) = self.rank3(x, "warp input")?;
        if (h, w) != (plan.h_in, plan.w_in) {
            return Err(Error::dim(format!(
                "warp plan expects {}x{} input, got {h}x{w}",
                plan.h_in, plan.w_in
            )));
        }
        if plan.taps.len() != plan.h_out * plan.w_out {
            return Err(Error::dim("warp plan tap count mismatch".to_string()));
        }
        let in_spatial = h * w;
        let out_spatial = plan.h_out * plan.w_out;
        for t in &plan.taps {
            if t.idx.iter().any(|&i| (i as usize) >= in_spatial) {
                return Err(Error::dim("warp tap index outside source".to_string()));
            }
        }
        let xdata = &self.tensors[x].data;
        let mut out = vec![0.0f32; c * out_spatial];
        let taps = &plan.taps;
        let f = |ch: usize, out_c: &mut [f32]| {
            let x_c = &xdata[ch * in_spatial..][..in_spatial];
            for (cell, tap) in taps.iter().enumerate() {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    acc += tap.wgt[k] * x_c[tap.idx[k] as usize];
                }
                out_c[cell] = acc;
            }
        };
        match self.exec {
            Exec::Auto => crate::par::for_each_chunk_mut(&mut out, out_spatial, f),
            Exec::Seq => crate::par::for_each_chunk_mut_seq(&mut out, out_spatial, f),
        }
        let rg = self.tensors[x].requires_grad;
        let (ho, wo) = (plan.h_out, plan.w_out);
        Ok(self.push(out, vec![c, ho, wo], rg, Op::WarpBev { x, plan }))
    }

    /// Focal binary cross-entropy on sigmoid logits gathered from `x` at
    /// `pos`/`neg` flat indices, normalized by `norm`.
    pub fn focal_bce(
        &mut self,
        x: TensorId,
        pos: Vec<u32>,
        neg: Vec<u32>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Result<TensorId> {
        let n = self.tensors[x].numel();
        if pos.iter().chain(neg.iter()).any(|&i| (i as usize) >= n) {
            return Err(Error::dim("focal_bce index outside tensor".to_string()));
        }
        if norm <= 0.0 {
            return Err(Error::degenerate("focal_bce norm must be positive".to_string()));
        }
        let inv_norm = 1.0 / norm;
        let data = &self.tensors[x].data;
        let mut acc = 0.0f64;
        for &i in &pos {
            let z = data[i as usize] as f64;
            let q = stable_sigmoid(-z); // 1 - p
            acc += alpha * libm::pow(q, gamma) * softplus(-z);
        }
        for &i in &neg {
            let z = data[i as usize] as f64;
            let p = stable_sigmoid(z);
            acc += (1.0 - alpha) * libm::pow(p, gamma) * softplus(z);
        }
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(
            vec![(acc * inv_norm) as f32],
            vec![1],
            rg,
            Op::FocalBce { x, pos, neg, alpha, gamma, inv_norm },
        ))
    }

    /// Huber (δ=1) penalty on `x[idx[k]] − target[k]`, weighted and
    /// normalized by `norm`.
    pub fn smooth_l1(
        &mut self,
        x: TensorId,
        idx: Vec<u32>,
        target: Vec<f32>,
        weight: Vec<f32>,
        norm: f64,
    ) -> Result<TensorId> {
        if idx.len() != target.len() || idx.len() != weight.len() {
            return Err(Error::dim("smooth_l1 index/target/weight lengths differ".to_string()));
        }
        let n = self.tensors[x].numel();
        if idx.iter().any(|&i| (i as usize) >= n) {
            return Err(Error::dim("smooth_l1 index outside tensor".to_string()));
        }
        if norm <= 0.0 {
            return Err(Error::degenerate("smooth_l1 norm must be positive".to_string()));
        }
        let inv_norm = 1.0 / norm;
        let data = &self.tensors[x].data;
        let mut acc = 0.0f64;
        for k in 0..idx.len() {
            let e = (data[idx[k] as usize] - target[k]) as f64;
            let a = e.abs();
            let huber = if a <= 1.0 { 0.5 * e * e } else { a - 0.5 };
            acc += weight[k] as f64 * huber;
        }
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(
            vec![(acc * inv_norm) as f32],
            vec![1],
            rg,
            Op::SmoothL1 { x, idx, target, weight, inv_norm },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Accumulates `∂loss/∂t` into every tensor with `requires_grad`,
    /// visiting ops in reverse creation order. Consumes the tape's ability
    /// to run again: a second call errors.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::usage("backward already ran on this tape; record a fresh tape"));
        }
        if self.tensors[loss].numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.tensors[loss].shape
            )));
        }
        self.backward_done = true;
        let n = self.tensors.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.dispatch_backward(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if t.requires_grad {
                t.grad = g;
            }
        }
        Ok(())
    }

    fn needs(&self, id: TensorId) -> bool {
        self.tensors[id].requires_grad
    }

    fn dispatch_backward(&self, id: TensorId, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        fn ensure<'a>(grads: &'a mut [Option<Vec<f32>>], id: TensorId, n: usize) -> &'a mut [f32] {
            grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
        }

        match &self.ops[id] {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (ci, h, wd) = match *self.tensors[*x].shape {
                    [a, b_, c] => (a, b_, c),
                    _ => unreachable!(),
                };
                let (co, _, kh, kw) = match *self.tensors[*w].shape {
                    [a, b_, c, d] => (a, b_, c, d),
                    _ => unreachable!(),
                };
                let (oh, ow) = (self.tensors[id].shape[1], self.tensors[id].shape[2]);
                if self.needs(*x) {
                    let gin = ensure(grads, *x, ci * h * wd);
                    kernels::conv2d_backward_input(
                        self.exec, gout, co, oh, ow, &self.tensors[*w].data, ci, kh, kw, *stride, *pad, gin, h, wd,
                    );
                }
                if self.needs(*w) {
                    let gw = ensure(grads, *w, co * ci * kh * kw);
                    kernels::conv2d_backward_weight(
                        self.exec, gout, oh, ow, &self.tensors[*x].data, ci, h, wd, *stride, *pad, gw, kh, kw,
                    );
                }
                if self.needs(*b) {
                    let gb = ensure(grads, *b, co);
                    kernels::conv2d_backward_bias(gout, co, oh * ow, gb);
                }
            }
            Op::Deconv2d { x, w, b, stride, pad } => {
                let (ci, h, wd) = match *self.tensors[*x].shape {
                    [a, b_, c] => (a, b_, c),
                    _ => unreachable!(),
                };
                let (_, co, kh, kw) = match *self.tensors[*w].shape {
                    [a, b_, c, d] => (a, b_, c, d),
                    _ => unreachable!(),
                };
                let (oh, ow) = (self.tensors[id].shape[1], self.tensors[id].shape[2]);
                if self.needs(*x) {
                    let gin = ensure(grads, *x, ci * h * wd);
                    kernels::deconv2d_backward_input(
                        self.exec, gout, co, oh, ow, &self.tensors[*w].data, ci, kh, kw, *stride, *pad, gin, h, wd,
                    );
                }
                if self.needs(*w) {
                    let gw = ensure(grads, *w, ci * co * kh * kw);
                    kernels::deconv2d_backward_weight(
                        self.exec, gout, co, oh, ow, &self.tensors[*x].data, h, wd, *stride, *pad, gw, kh, kw,
                    );
                }
                if self.needs(*b) {
                    let gb = ensure(grads, *b, co);
                    kernels::conv2d_backward_bias(gout, co, oh * ow, gb);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xdata = &self.tensors[*x].data;
                    let gin = ensure(grads, *x, xdata.len());
                    for i in 0..xdata.len() {
                        if xdata[i] > 0.0 {
                            gin[i] += gout[i];
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, n) = match *self.tensors[*x].shape {
                    [n] => (1, n),
                    [rows, n] => (rows, n),
                    _ => unreachable!(),
                };
                let m = self.tensors[*b].shape[0];
                // Accumulate into temporaries, then merge only what is needed.
                let mut gx = vec![0.0f32; rows * n];
                let mut gw = vec![0.0f32; m * n];
                let mut gb = vec![0.0f32; m];
                kernels::linear_backward(
                    gout,
                    rows,
                    m,
                    &self.tensors[*x].data,
                    n,
                    &self.tensors[*w].data,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                );
                if self.needs(*x) {
                    let gin = ensure(grads, *x, rows * n);
                    for (a, v) in gin.iter_mut().zip(&gx) {
                        *a += v;
                    }
                }
                if self.needs(*w) {
                    let gin = ensure(grads, *w, m * n);
                    for (a, v) in gin.iter_mut().zip(&gw) {
                        *a += v;
                    }
                }
                if self.needs(*b) {
                    let gin = ensure(grads, *b, m);
                    for (a, v) in gin.iter_mut().zip(&gb) {
                        *a += v;
                    }
                }
            }
            Op::ConcatCh { a, b } => {
                let na = self.tensors[*a].numel();
                let nb = self.tensors[*b].numel();
                if self.needs(*a) {
                    let gin = ensure(grads, *a, na);
                    for i in 0..na {
                        gin[i] += gout[i];
                    }
                }
                if self.needs(*b) {
                    let gin = ensure(grads, *b, nb);
                    for i in 0..nb {
                        gin[i] += gout[na + i];
                    }
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(*x) {
                    let n = self.tensors[*x].numel();
                    let gin = ensure(grads, *x, n);
                    for i in 0..n {
                        gin[i] += gout[i] * mul;
                    }
                }
            }
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    if self.needs(side) {
                        let n = self.tensors[side].numel();
                        let gin = ensure(grads, side, n);
                        for i in 0..n {
                            gin[i] += gout[i];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let n = self.tensors[*x].numel();
                    let g = gout[0];
                    let gin = ensure(grads, *x, n);
                    for v in gin.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let g = gout[0];
                    let gin = ensure(grads, *x, weights.len());
                    for (a, &w) in gin.iter_mut().zip(weights) {
                        *a += g * w;
                    }
                }
            }
            Op::CosineSim { a, b, dot, na, nb } => {
                let g = gout[0] as f64;
                let cosv = dot / (na * nb);
                if self.needs(*a) {
                    let adata = &self.tensors[*a].data;
                    let bdata = &self.tensors[*b].data;
                    let gin = ensure(grads, *a, adata.len());
                    for i in 0..adata.len() {
                        let d = bdata[i] as f64 / (na * nb) - cosv * adata[i] as f64 / (na * na);
                        gin[i] += (g * d) as f32;
                    }
                }
                if self.needs(*b) {
                    let adata = &self.tensors[*a].data;
                    let bdata = &self.tensors[*b].data;
                    let gin = ensure(grads, *b, bdata.len());
                    for i in 0..bdata.len() {
                        let d = adata[i] as f64 / (na * nb) - cosv * bdata[i] as f64 / (nb * nb);
                        gin[i] += (g * d) as f32;
                    }
                }
            }
            Op::L1Norm { x } => {
                if self.needs(*x) {
                    let g = gout[0];
                    let xdata = &self.tensors[*x].data;
                    let gin = ensure(grads, *x, xdata.len());
                    for i in 0..xdata.len() {
                        gin[i] += g * sign(xdata[i]);
                    }
                }
            }
            Op::L2Norm { x, norm } => {
                if self.needs(*x) && *norm > 0.0 {
                    let g = gout[0] as f64 / norm;
                    let xdata = &self.tensors[*x].data;
                    let gin = ensure(grads, *x, xdata.len());
                    for i in 0..xdata.len() {
                        gin[i] += (g * xdata[i] as f64) as f32;
                    }
                }
            }
            Op::RescaleL1 { x, reference, lx, lref } => {
                let factor = lref / lx;
                let xdata = &self.tensors[*x].data;
                if self.needs(*x) {
                    // d out_j/d x_k = (lref/lx)·δ_jk − (lref/lx²)·x_j·sign(x_k)
                    let mut s = 0.0f64;
                    for i in 0..xdata.len() {
                        s += gout[i] as f64 * xdata[i] as f64;
                    }
                    let coef = s * lref / (lx * lx);
                    let gin = ensure(grads, *x, xdata.len());
                    for i in 0..xdata.len() {
                        gin[i] += (gout[i] as f64 * factor - coef * sign(xdata[i]) as f64) as f32;
                    }
                }
                if self.needs(*reference) {
                    let refdata = &self.tensors[*reference].data;
                    let mut s = 0.0f64;
                    for i in 0..xdata.len() {
                        s += gout[i] as f64 * xdata[i] as f64;
                    }
                    let coef = s / lx;
                    let gin = ensure(grads, *reference, refdata.len());
                    for i in 0..refdata.len() {
                        gin[i] += (coef * sign(refdata[i]) as f64) as f32;
                    }
                }
            }
            Op::PillarEmbed { w, b, batch, argmax } => {
                let (c_n, in_dim) = (self.tensors[*w].shape[0], self.tensors[*w].shape[1]);
                let spatial = batch.ny * batch.nx;
                let need_w = self.needs(*w);
                let need_b = self.needs(*b);
                if !need_w && !need_b {
                    return;
                }
                let mut gw = vec![0.0f32; c_n * in_dim];
                let mut gb = vec![0.0f32; c_n];
                for (gi, g) in batch.groups.iter().enumerate() {
                    for c in 0..c_n {
                        let am = argmax[gi * c_n + c];
                        if am < 0 {
                            continue;
                        }
                        let gv = gout[c * spatial + g.cell];
                        if gv == 0.0 {
                            continue;
                        }
                        let row = &g.feats[am as usize * in_dim..][..in_dim];
                        let gw_row = &mut gw[c * in_dim..][..in_dim];
                        for d in 0..in_dim {
                            gw_row[d] += gv * row[d];
                        }
                        gb[c] += gv;
                    }
                }
                if need_w {
                    let gin = ensure(grads, *w, c_n * in_dim);
                    for (a, v) in gin.iter_mut().zip(&gw) {
                        *a += v;
                    }
                }
                if need_b {
                    let gin = ensure(grads, *b, c_n);
                    for (a, v) in gin.iter_mut().zip(&gb) {
                        *a += v;
                    }
                }
            }
            Op::WarpBev { x, plan } => {
                if self.needs(*x) {
                    let c = self.tensors[*x].shape[0];
                    let in_spatial = plan.h_in * plan.w_in;
                    let out_spatial = plan.h_out * plan.w_out;
                    let gin = ensure(grads, *x, c * in_spatial);
                    let f = |ch: usize, gin_c: &mut [f32]| {
                        let g_c = &gout[ch * out_spatial..][..out_spatial];
                        for (cell, tap) in plan.taps.iter().enumerate() {
                            let gv = g_c[cell];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..4 {
                                gin_c[tap.idx[k] as usize] += tap.wgt[k] * gv;
                            }
                        }
                    };
                    match self.exec {
                        Exec::Auto => crate::par::for_each_chunk_mut(gin, in_spatial, f),
                        Exec::Seq => crate::par::for_each_chunk_mut_seq(gin, in_spatial, f),
                    }
                }
            }
            Op::FocalBce { x, pos, neg, alpha, gamma, inv_norm } => {
                if self.needs(*x) {
                    let g = gout[0] as f64 * inv_norm;
                    let xdata = &self.tensors[*x].data;
                    let n = xdata.len();
                    let gin = ensure(grads, *x, n);
                    for &i in pos {
                        let z = xdata[i as usize] as f64;
                        let p = stable_sigmoid(z);
                        let q = stable_sigmoid(-z);
                        let lnp = -softplus(-z);
                        let d = alpha * libm::pow(q, *gamma) * (*gamma * p * lnp - q);
                        gin[i as usize] += (g * d) as f32;
                    }
                    for &i in neg {
                        let z = xdata[i as usize] as f64;
                        let p = stable_sigmoid(z);
                        let q = stable_sigmoid(-z);
                        let lnq = -softplus(z);
                        let d = (1.0 - alpha) * libm::pow(p, *gamma) * (p - *gamma * q * lnq);
                        gin[i as usize] += (g * d) as f32;
                    }
                }
            }
            Op::SmoothL1 { x, idx, target, weight, inv_norm } => {
                if self.needs(*x) {
                    let g = gout[0] as f64 * inv_norm;
                    let xdata = &self.tensors[*x].data;
                    let n = xdata.len();
                    let gin = ensure(grads, *x, n);
                    for k in 0..idx.len() {
                        let e = (xdata[idx[k] as usize] - target[k]) as f64;
                        let d = e.clamp(-1.0, 1.0) * weight[k] as f64;
                        gin[idx[k] as usize] += (g * d) as f32;
                    }
                }
            }
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape() -> Tape {
        Tape::new()
    }

    #[test]
    fn relu_clamps_negatives_and_routes_gradient() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![-1.0, 0.0, 2.0], vec![3], true).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0, 2.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        // Subgradient at 0 is 0.
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![1.0, -2.0, 3.5, 0.25], vec![4], true).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
        let z = t.add(x, x).unwrap();
        let s = t.sum(z).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn scale_by_one_is_bitwise_identity() {
        let mut t = scalar_tape();
        let vals = vec![1.5, -0.0, 3.25e-7, -19.0];
        let x = t.tensor(vals.clone(), vec![4], false).unwrap();
        let y = t.scale(x, 1.0).unwrap();
        assert!(t.data(y).iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn concat_routes_gradients_to_both_parents() {
        let mut t = scalar_tape();
        let a = t.tensor(vec![1.0; 4], vec![1, 2, 2], true).unwrap();
        let b = t.tensor(vec![2.0; 8], vec![2, 2, 2], true).unwrap();
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(c), &[3, 2, 2]);
        let w: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let s = t.weighted_sum(c, w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.grad(b).unwrap(), &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn cosine_of_identical_and_scaled_inputs_is_one() {
        let mut t = scalar_tape();
        let a = t.tensor(vec![1.0, 2.0, -3.0], vec![3], false).unwrap();
        let b = t.tensor(vec![2.0, 4.0, -6.0], vec![3], false).unwrap();
        let c = t.cosine_similarity(a, b).unwrap();
        assert!((t.value(c) - 1.0).abs() < 1e-6);
        let mut t2 = scalar_tape();
        let a = t2.tensor(vec![1.0, 0.0], vec![2], false).unwrap();
        let b = t2.tensor(vec![0.0, 5.0], vec![2], false).unwrap();
        let c = t2.cosine_similarity(a, b).unwrap();
        assert!(t2.value(c).abs() < 1e-7);
    }

    #[test]
    fn cosine_of_zero_vector_is_degenerate() {
        let mut t = scalar_tape();
        let a = t.tensor(vec![0.0; 3], vec![3], false).unwrap();
        let b = t.tensor(vec![1.0; 3], vec![3], false).unwrap();
        assert!(matches!(t.cosine_similarity(a, b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rescale_l1_matches_hand_example() {
        // x=[1,2,3] (L1=6), ref=[2,4,6] (L1=12) → factor 2 → [2,4,6].
        let mut t = scalar_tape();
        let x = t.tensor(vec![1.0, 2.0, 3.0], vec![3], false).unwrap();
        let r = t.tensor(vec![2.0, 4.0, 6.0], vec![3], false).unwrap();
        let y = t.rescale_l1(x, r).unwrap();
        assert_eq!(t.data(y), &[2.0, 4.0, 6.0]);
        let l1: f32 = t.data(y).iter().map(|v| v.abs()).sum();
        assert!((l1 - 12.0).abs() / 12.0 < 1e-3);
    }

    #[test]
    fn rescale_l1_rejects_zero_norm_input() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![0.0; 3], vec![3], false).unwrap();
        let r = t.tensor(vec![1.0; 3], vec![3], false).unwrap();
        assert!(matches!(t.rescale_l1(x, r), Err(Error::Degenerate(_))));
    }

    #[test]
    fn norms_match_hand_values() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![3.0, -4.0], vec![2], false).unwrap();
        let l1 = t.l1_norm(x).unwrap();
        let l2 = t.l2_norm(x).unwrap();
        assert_eq!(t.value(l1), 7.0);
        assert_eq!(t.value(l2), 5.0);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![1.0], vec![1], true).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_from_non_scalar_errors() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_even_kernels() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![0.0; 2 * 5 * 5], vec![2, 5, 5], false).unwrap();
        let w_bad = t.tensor(vec![0.0; 3 * 3 * 3 * 3], vec![3, 3, 3, 3], false).unwrap();
        let b = t.tensor(vec![0.0; 3], vec![3], false).unwrap();
        assert!(matches!(t.conv2d(x, w_bad, b, 1, 1), Err(Error::Dimension(_))));
        let w_even = t.tensor(vec![0.0; 3 * 2 * 2 * 2], vec![3, 2, 2, 2], false).unwrap();
        assert!(matches!(t.conv2d(x, w_even, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn deconv2d_accepts_even_kernels() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![5.0], vec![1, 1, 1], false).unwrap();
        let w = t.tensor(vec![1.0; 4], vec![1, 1, 2, 2], false).unwrap();
        let b = t.tensor(vec![0.0], vec![1], false).unwrap();
        let y = t.deconv2d(x, w, b, 2, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
        assert_eq!(t.data(y), &[5.0; 4]);
    }

    #[test]
    fn conv_op_counter_tracks_conv_family_only() {
        let mut t = scalar_tape();
        let x = t.tensor(vec![1.0; 9], vec![1, 3, 3], false).unwrap();
        let w = t.tensor(vec![1.0; 9], vec![1, 1, 3, 3], false).unwrap();
        let b = t.tensor(vec![0.0], vec![1], false).unwrap();
        assert_eq!(t.conv_op_count(), 0);
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let _ = t.relu(y).unwrap();
        let _ = t.scale(y, 2.0).unwrap();
        assert_eq!(t.conv_op_count(), 1);
    }

    #[test]
    fn composed_network_stays_finite() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut t = scalar_tape();
        let x_data: Vec<f32> = (0..2 * 9 * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = t.tensor(x_data, vec![2, 9, 9], false).unwrap();
        let w1 = t.tensor((0..4 * 2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect(), vec![4, 2, 3, 3], true).unwrap();
        let b1 = t.tensor(vec![0.1; 4], vec![4], true).unwrap();
        let h1 = t.conv2d(x, w1, b1, 2, 1).unwrap();
        let h1 = t.relu(h1).unwrap();
        let w2 = t.tensor((0..4 * 4 * 16).map(|_| rng.gen_range(-0.5..0.5)).collect(), vec![4, 4, 4, 4], true).unwrap();
        let b2 = t.tensor(vec![0.0; 4], vec![4], true).unwrap();
        let h2 = t.deconv2d(h1, w2, b2, 2, 1).unwrap();
        let h2 = t.relu(h2).unwrap();
        assert!(t.data(h2).iter().all(|v| v.is_finite()));
        let s = t.sum(h2).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(w1).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn param_accumulation_across_micro_batches() {
        let mut acc = GradMap::new();
        let mut g1 = GradMap::new();
        g1.insert("w".to_string(), vec![1.0, 2.0]);
        let mut g2 = GradMap::new();
        g2.insert("w".to_string(), vec![0.5, -1.0]);
        accumulate_grads(&mut acc, g1);
        accumulate_grads(&mut acc, g2);
        assert_eq!(acc["w"], vec![1.5, 1.0]);
    }
}
