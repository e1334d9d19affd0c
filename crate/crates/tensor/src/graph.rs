//! Tape of recorded operations and the forward constructors that append to it.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::shape::{self, numel};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Softplus,
    Clamp(f64, f64),
    Matmul,
    Conv2d(ConvGeom),
    Softmax(usize),
    LogSoftmax(usize),
    GroupNorm { groups: usize, rstd: Vec<f64> },
    AvgPool(usize),
    UpsampleNearest(usize),
    UpsampleBilinear(usize),
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    Permute(Vec<usize>),
    Reshape,
    Gather { axis: usize, indices: Vec<usize> },
    ScatterAdd { axis: usize, indices: Vec<usize> },
    CosineSimilarity { axis: usize, eps: f64 },
    BilinearSample,
    Reduce { kind: ReduceKind, axes: Vec<usize>, argmax: Vec<usize> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Minimum => "minimum",
            Op::Maximum => "maximum",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Softplus => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Matmul => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::GroupNorm { .. } => "group_norm",
            Op::AvgPool(_) => "avg_pool",
            Op::UpsampleNearest(_) => "upsample_nearest",
            Op::UpsampleBilinear(_) => "upsample_bilinear",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute(_) => "permute",
            Op::Reshape => "reshape",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::CosineSimilarity { .. } => "cosine_similarity",
            Op::BilinearSample => "bilinear_sample",
            Op::Reduce { .. } => "reduce",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

#[derive(Debug, Clone, Default)]
enum ChoiceMode {
    #[default]
    Record,
    Replay(usize),
}

/// Recorded forward computation for one sample.
///
/// Nodes are appended in execution order, which is a topological order, so
/// the backward pass simply walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    choices: Vec<Vec<usize>>,
    choice_mode: ChoiceMode,
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that replays previously recorded discrete choices instead of
    /// recomputing them (used to freeze assignments during gradient checks).
    pub fn replaying(choices: Vec<Vec<usize>>) -> Self {
        Self {
            choices,
            choice_mode: ChoiceMode::Replay(0),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn recorded_choices(&self) -> &[Vec<usize>] {
        &self.choices
    }

    /// Records (or replays) a discrete, non-differentiable decision.
    pub fn choice(&mut self, compute: impl FnOnce(&Graph) -> Vec<usize>) -> Result<Vec<usize>> {
        match &mut self.choice_mode {
            ChoiceMode::Record => {
                let c = compute(self);
                self.choices.push(c.clone());
                Ok(c)
            }
            ChoiceMode::Replay(cursor) => {
                let i = *cursor;
                *cursor += 1;
                self.choices
                    .get(i)
                    .cloned()
                    .ok_or(TensorError::ChoiceReplay(i))
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node (in execution order) holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let t = Tensor::raw(t.dims().to_vec(), t.into_data());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a stored parameter; one leaf per parameter per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(
            Tensor::raw(p.dims().to_vec(), p.data().to_vec()),
            p.requires_grad,
        );
        self.nodes[v.0].param = Some(id);
        self.param_leaves.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let out_dims = shape::broadcast_shapes(&da, &db)
            .ok_or_else(|| shape_err(name, &[&da, &db], "not broadcastable"))?;
        let (xa, xb) = (self.data(a), self.data(b));
        let data: Vec<f64> = if da == db {
            xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect()
        } else {
            let oa = shape::map_offsets(&out_dims, &shape::broadcast_strides(&da, &out_dims));
            let ob = shape::map_offsets(&out_dims, &shape::broadcast_strides(&db, &out_dims));
            oa.iter().zip(&ob).map(|(&i, &j)| f(xa[i], xb[j])).collect()
        };
        Ok(self.push(op, vec![a, b], Tensor::raw(out_dims, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |p, q| p / q)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Minimum, a, b, |p, q| if q < p { q } else { p })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Maximum, a, b, |p, q| if q > p { q } else { p })
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let dims = t.dims().to_vec();
        self.push(op, vec![x], Tensor::raw(dims, data))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), x, |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::AddScalar, x, |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log, x, f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Op::Sqrt, x, f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Op::Gelu, x, gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus, x, softplus)
    }

    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Var {
        self.unary(Op::Clamp(min, max), x, |v| v.clamp(min, max))
    }

    // ---------------------------------------------------------------- linear

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(shape_err("matmul", &[da, db], "expected [m,k] @ [k,n]"));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Op::Matmul, vec![a, b], Tensor::raw(vec![m, n], data)))
    }

    /// Column-major point layout: `W[out,in] @ X[in,n] + b[out]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(w, x)?;
        match b {
            Some(b) => {
                let out = self.dims(w)[0];
                let b = self.reshape(b, &[out, 1])?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// 2-D convolution of a `[C,H,W]` sample with `[Cout, C/groups, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var> {
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if dx.len() != 3 || dw.len() != 4 || stride == 0 || dilation == 0 || groups == 0 {
            return Err(shape_err("conv2d", &[&dx, &dw], "expected [C,H,W] input and [O,C/g,kh,kw] weight"));
        }
        let (cin, h, wd) = (dx[0], dx[1], dx[2]);
        let (cout, cin_g, kh, kw) = (dw[0], dw[1], dw[2], dw[3]);
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err("conv2d", &[&dx, &dw], format!("channel/group mismatch (groups={groups})")));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || wd + 2 * padding < span_w {
            return Err(shape_err("conv2d", &[&dx, &dw], "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            padding,
            dilation,
            groups,
            ho: (h + 2 * padding - span_h) / stride + 1,
            wo: (wd + 2 * padding - span_w) / stride + 1,
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let (kr, np, cog) = (geom.krows(), geom.npix(), geom.cout_g());
        let mut out = vec![0.0; cout * np];
        let wdata = self.data(w);
        for g in 0..groups {
            kernels::gemm(
                cog,
                kr,
                np,
                1.0,
                &wdata[g * cog * kr..],
                (kr as isize, 1),
                &cols[g * kr * np..],
                (np as isize, 1),
                0.0,
                &mut out[g * cog * np..],
                (np as isize, 1),
            );
        }
        let y = self.push(
            Op::Conv2d(geom),
            vec![x, w],
            Tensor::raw(vec![cout, geom.ho, geom.wo], out),
        );
        match bias {
            Some(b) => {
                let b = self.reshape(b, &[cout, 1, 1])?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// 1-D convolution of `[C,L]` with `[Cout, C, k]` weights, zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if dx.len() != 2 || dw.len() != 3 {
            return Err(shape_err("conv1d", &[&dx, &dw], "expected [C,L] input and [O,C,k] weight"));
        }
        // Run as a 2-D convolution over a [C, L, 1] plane; padding is applied
        // along L only, so it is spliced in explicitly.
        let mut x2 = self.reshape(x, &[dx[0], dx[1], 1])?;
        if padding > 0 {
            let z = self.constant(Tensor::zeros(vec![dx[0], padding, 1]));
            x2 = self.concat(&[z, x2, z], 1)?;
        }
        let w2 = self.reshape(w, &[dw[0], dw[1], dw[2], 1])?;
        let y = self.conv2d(x2, w2, None, 1, 0, 1, 1)?;
        let l_out = self.dims(y)[1];
        self.reshape(y, &[dw[0], l_out])
    }

    // ------------------------------------------------------- normalization

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(shape_err("softmax", &[&dims], format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = shape::split_at_axis(&dims, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    sum += (src[base + j * inner] - mx).exp();
                }
                let lse = mx + sum.ln();
                for j in 0..n {
                    let v = src[base + j * inner] - lse;
                    out[base + j * inner] = if log { v } else { v.exp() };
                }
            }
        }
        let op = if log { Op::LogSoftmax(axis) } else { Op::Softmax(axis) };
        Ok(self.push(op, vec![x], Tensor::raw(dims, out)))
    }

    /// Group normalization without affine parameters over a `[C, ...]` tensor.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.is_empty() || groups == 0 || dims[0] % groups != 0 {
            return Err(shape_err("group_norm", &[&dims], format!("{groups} groups do not divide channels")));
        }
        let src = self.data(x);
        let gsize = src.len() / groups;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let s = &src[g * gsize..(g + 1) * gsize];
            let mean = s.iter().sum::<f64>() / gsize as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out[g * gsize..(g + 1) * gsize].iter_mut().zip(s) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(Op::GroupNorm { groups, rstd }, vec![x], Tensor::raw(dims, out)))
    }

    /// Per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let c = *self
            .dims(x)
            .first()
            .ok_or_else(|| shape_err("instance_norm", &[&[]], "rank-0 input"))?;
        self.group_norm(x, c, eps)
    }

    // -------------------------------------------------------------- pooling

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 3 {
            return Err(shape_err("global_avg_pool", &[&dims], "expected [C,H,W]"));
        }
        self.reduce(x, ReduceKind::Mean, &[1, 2], true)
    }

    /// Non-overlapping `k×k` average pooling of `[C,H,W]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 3 || k == 0 || dims[1] % k != 0 || dims[2] % k != 0 {
            return Err(shape_err("avg_pool", &[&dims], format!("grid {k} must divide H and W")));
        }
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let (ho, wo) = (h / k, w / k);
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * ho + y / k) * wo + xx / k] += src[(ch * h + y) * w + xx] * inv;
                }
            }
        }
        Ok(self.push(Op::AvgPool(k), vec![x], Tensor::raw(vec![c, ho, wo], out)))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 3 || factor == 0 {
            return Err(shape_err("upsample_nearest", &[&dims], "expected [C,H,W]"));
        }
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = src[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        Ok(self.push(Op::UpsampleNearest(factor), vec![x], Tensor::raw(vec![c, ho, wo], out)))
    }

    /// Bilinear upsampling with half-pixel centers (align_corners = false).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 3 || factor == 0 {
            return Err(shape_err("upsample_bilinear", &[&dims], "expected [C,H,W]"));
        }
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let (ty, tx) = (kernels::upsample_taps(h, factor), kernels::upsample_taps(w, factor));
        let (ho, wo) = (ty.len(), tx.len());
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                    out[(ch * ho + y) * wo + xx] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        Ok(self.push(Op::UpsampleBilinear(factor), vec![x], Tensor::raw(vec![c, ho, wo], out)))
    }

    // -------------------------------------------------------- restructuring

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .dims(*xs.first().ok_or_else(|| shape_err("concat", &[], "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first], format!("axis {axis} out of range")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let d = self.dims(x);
            let ok = d.len() == first.len()
                && d.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let all: Vec<&[usize]> = xs.iter().map(|&v| self.dims(v)).collect();
                return Err(shape_err("concat", &all, format!("mismatch off axis {axis}")));
            }
            sizes.push(d[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out_dims = first.clone();
        out_dims[axis] = total;
        let (outer, _, inner) = shape::split_at_axis(&out_dims, axis);
        let mut out = vec![0.0; numel(&out_dims)];
        let mut offset = 0;
        for (&x, &sz) in xs.iter().zip(&sizes) {
            let src = self.data(x);
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + sz * inner].copy_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
            offset += sz;
        }
        Ok(self.push(Op::Concat { axis, sizes }, xs.to_vec(), Tensor::raw(out_dims, out)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(shape_err("slice", &[&dims], format!("[{start}, {}) out of range on axis {axis}", start + len)));
        }
        let (outer, n, inner) = shape::split_at_axis(&dims, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        Ok(self.push(Op::Slice { axis, start }, vec![x], Tensor::raw(out_dims, out)))
    }

    /// Splits `axis` into equal parts.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || parts == 0 || dims[axis] % parts != 0 {
            return Err(shape_err("split", &[&dims], format!("{parts} parts do not divide axis {axis}")));
        }
        let step = dims[axis] / parts;
        (0..parts).map(|i| self.slice(x, axis, i * step, step)).collect()
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let mut seen = vec![false; dims.len()];
        if perm.len() != dims.len() || perm.iter().any(|&p| p >= dims.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &[&dims], format!("invalid permutation {perm:?}")));
        }
        let st = shape::strides(&dims);
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let view: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let offs = shape::map_offsets(&out_dims, &view);
        let src = self.data(x);
        let out = offs.iter().map(|&o| src[o]).collect();
        Ok(self.push(Op::Permute(perm.to_vec()), vec![x], Tensor::raw(out_dims, out)))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let cur = self.dims(x);
        if numel(cur) != numel(dims) {
            return Err(shape_err("reshape", &[cur, dims], "element count differs"));
        }
        if cur == dims {
            return Ok(x);
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape, vec![x], Tensor::raw(dims.to_vec(), data)))
    }

    /// Selects `indices` along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(shape_err("gather", &[&dims], format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = shape::split_at_axis(&dims, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", &[&dims], format!("index {bad} out of range on axis {axis}")));
        }
        let m = indices.len();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * n + i) * inner;
                out.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_dims = dims;
        out_dims[axis] = m;
        Ok(self.push(
            Op::Gather { axis, indices: indices.to_vec() },
            vec![x],
            Tensor::raw(out_dims, out),
        ))
    }

    /// Sums slice `j` of `axis` into output slot `indices[j]` of an axis of length `size`.
    pub fn scatter_add(&mut self, x: Var, axis: usize, indices: &[usize], size: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || dims[axis] != indices.len() {
            return Err(shape_err("scatter_add", &[&dims], format!("{} indices for axis {axis}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
            return Err(shape_err("scatter_add", &[&dims], format!("index {bad} >= size {size}")));
        }
        let (outer, m, inner) = shape::split_at_axis(&dims, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * size * inner];
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let s = (o * m + j) * inner;
                let d = (o * size + i) * inner;
                for t in 0..inner {
                    out[d + t] += src[s + t];
                }
            }
        }
        let mut out_dims = dims;
        out_dims[axis] = size;
        Ok(self.push(
            Op::ScatterAdd { axis, indices: indices.to_vec() },
            vec![x],
            Tensor::raw(out_dims, out),
        ))
    }

    // ------------------------------------------------------------ geometry

    /// Cosine similarity of `a` and `b` along `axis` (kept as size 1).
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize, eps: f64) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da != db || axis >= da.len() {
            return Err(shape_err("cosine_similarity", &[&da, &db], "operands must match"));
        }
        let (outer, n, inner) = shape::split_at_axis(&da, axis);
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for j in 0..n {
                    let k = (o * n + j) * inner + i;
                    dot += xa[k] * xb[k];
                    na += xa[k] * xa[k];
                    nb += xb[k] * xb[k];
                }
                out[o * inner + i] = dot / (na * nb).sqrt().max(eps);
            }
        }
        let mut out_dims = da;
        out_dims[axis] = 1;
        Ok(self.push(Op::CosineSimilarity { axis, eps }, vec![a, b], Tensor::raw(out_dims, out)))
    }

    /// Samples `map[C,H,W]` at continuous `(x, y)` pixel coordinates `coords[N,2]`.
    /// Taps outside the map read as zero.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (dm, dc) = (self.dims(map).to_vec(), self.dims(coords).to_vec());
        if dm.len() != 3 || dc.len() != 2 || dc[1] != 2 {
            return Err(shape_err("bilinear_sample", &[&dm, &dc], "expected [C,H,W] map and [N,2] coords"));
        }
        let (c, h, w) = (dm[0], dm[1], dm[2]);
        let n = dc[0];
        let (src, xy) = (self.data(map), self.data(coords));
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let (x0, y0, wx, wy) = kernels::bilinear_taps(xy[2 * p], xy[2 * p + 1]);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let v00 = kernels::read_or_zero(plane, h, w, y0, x0);
                let v01 = kernels::read_or_zero(plane, h, w, y0, x0 + 1);
                let v10 = kernels::read_or_zero(plane, h, w, y0 + 1, x0);
                let v11 = kernels::read_or_zero(plane, h, w, y0 + 1, x0 + 1);
                out[ch * n + p] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
        Ok(self.push(Op::BilinearSample, vec![map, coords], Tensor::raw(vec![c, n], out)))
    }

    // ------------------------------------------------------------ reduction

    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axes.iter().any(|&a| a >= dims.len()) {
            return Err(shape_err("reduce", &[&dims], format!("axes {axes:?} out of range")));
        }
        let kept = shape::reduced_dims(&dims, axes);
        let offs = shape::map_offsets(&dims, &shape::broadcast_strides(&kept, &dims));
        let src = self.data(x);
        let nout = numel(&kept);
        let count = (src.len() / nout.max(1)) as f64;
        let mut argmax = Vec::new();
        let out = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut out = vec![0.0; nout];
                for (i, &o) in offs.iter().enumerate() {
                    out[o] += src[i];
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v /= count);
                }
                out
            }
            ReduceKind::Max => {
                let mut out = vec![f64::NEG_INFINITY; nout];
                argmax = vec![usize::MAX; nout];
                for (i, &o) in offs.iter().enumerate() {
                    if argmax[o] == usize::MAX || src[i] > out[o] {
                        out[o] = src[i];
                        argmax[o] = i;
                    }
                }
                out
            }
        };
        let out_dims = if keepdim {
            kept
        } else {
            dims.iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        Ok(self.push(
            Op::Reduce { kind, axes: axes.to_vec(), argmax },
            vec![x],
            Tensor::raw(out_dims, out),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.dims(x).len()).collect();
        self.reduce(x, ReduceKind::Sum, &axes, false).expect("full reduction is always valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.dims(x).len()).collect();
        self.reduce(x, ReduceKind::Mean, &axes, false).expect("full reduction is always valid")
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axes, keepdim)
    }

    pub fn max_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, ReduceKind::Max, axes, keepdim)
    }
}
