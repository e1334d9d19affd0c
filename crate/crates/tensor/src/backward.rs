use crate::error::{Result, TensorError};
use crate::graph::{sigmoid_scalar, Graph, Node, Op, ReduceKind, Var, GELU_C};
use crate::kernels::{self, gemm};
use crate::params::ParamId;
use crate::shape::{self, numel};
use crate::tensor::Tensor;

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf (parameter or input).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in leaf creation order. Parameters the loss does not
    /// depend on are reported as zeros.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.by_node[v.0].as_deref().map(|g| (id, g)))
    }
}

/// Reduces a broadcast gradient back to `dims`.
fn sum_to(g: &[f64], out_dims: &[usize], dims: &[usize]) -> Vec<f64> {
    if out_dims == dims {
        return g.to_vec();
    }
    let offs = shape::map_offsets(out_dims, &shape::broadcast_strides(dims, out_dims));
    let mut r = vec![0.0; numel(dims)];
    for (i, &o) in offs.iter().enumerate() {
        r[o] += g[i];
    }
    r
}

impl Graph {
    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ld = self.dims(loss);
        if numel(ld) != 1 {
            return Err(TensorError::NonScalarLoss(ld.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let local = self.node_backward(node, &gout, &needs);
            for ((v, g), need) in node.inputs.iter().zip(local).zip(needs) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                if node.requires_grad && grads[i].is_none() {
                    grads[i] = Some(vec![0.0; node.value.numel()]);
                }
                params.push((id, Var(i)));
            }
        }
        Ok(Gradients { by_node: grads, params })
    }

    fn node_backward(&self, node: &Node, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inp = |k: usize| -> &Tensor { &self.nodes[node.inputs[k].0].value };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Minimum | Op::Maximum => {
                binary_backward(&node.op, inp(0), inp(1), node.value.dims(), g, needs)
            }
            Op::Neg => vec![Some(g.iter().map(|v| -v).collect())],
            Op::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Exp => vec![Some(g.iter().zip(y).map(|(a, b)| a * b).collect())],
            Op::Log => vec![Some(g.iter().zip(inp(0).data()).map(|(a, x)| a / x).collect())],
            Op::Sqrt => vec![Some(g.iter().zip(y).map(|(a, s)| a / (2.0 * s)).collect())],
            Op::Square => vec![Some(g.iter().zip(inp(0).data()).map(|(a, x)| 2.0 * a * x).collect())],
            Op::Sigmoid => vec![Some(g.iter().zip(y).map(|(a, s)| a * s * (1.0 - s)).collect())],
            Op::Tanh => vec![Some(g.iter().zip(y).map(|(a, t)| a * (1.0 - t * t)).collect())],
            Op::Relu => vec![Some(
                g.iter()
                    .zip(inp(0).data())
                    .map(|(a, &x)| if x > 0.0 { *a } else { 0.0 })
                    .collect(),
            )],
            Op::Gelu => vec![Some(
                g.iter()
                    .zip(inp(0).data())
                    .map(|(a, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        a * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect(),
            )],
            Op::Softplus => vec![Some(
                g.iter().zip(inp(0).data()).map(|(a, &x)| a * sigmoid_scalar(x)).collect(),
            )],
            Op::Clamp(lo, hi) => vec![Some(
                g.iter()
                    .zip(inp(0).data())
                    .map(|(a, &x)| if x >= *lo && x <= *hi { *a } else { 0.0 })
                    .collect(),
            )],
            Op::Matmul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
                let ga = needs[0].then(|| {
                    let mut r = vec![0.0; m * k];
                    // dA = G @ B^T
                    gemm(m, n, k, 1.0, g, (n as isize, 1), b.data(), (1, n as isize), 0.0, &mut r, (k as isize, 1));
                    r
                });
                let gb = needs[1].then(|| {
                    let mut r = vec![0.0; k * n];
                    // dB = A^T @ G
                    gemm(k, m, n, 1.0, a.data(), (1, k as isize), g, (n as isize, 1), 0.0, &mut r, (n as isize, 1));
                    r
                });
                vec![ga, gb]
            }
            Op::Conv2d(geom) => {
                let (x, w) = (inp(0), inp(1));
                let (kr, np, cog) = (geom.krows(), geom.npix(), geom.cout_g());
                let gw = needs[1].then(|| {
                    let cols = kernels::im2col(x.data(), geom);
                    let mut r = vec![0.0; w.numel()];
                    for gi in 0..geom.groups {
                        gemm(
                            cog,
                            np,
                            kr,
                            1.0,
                            &g[gi * cog * np..],
                            (np as isize, 1),
                            &cols[gi * kr * np..],
                            (1, np as isize),
                            0.0,
                            &mut r[gi * cog * kr..],
                            (kr as isize, 1),
                        );
                    }
                    r
                });
                let gx = needs[0].then(|| {
                    let mut dcols = vec![0.0; geom.groups * kr * np];
                    for gi in 0..geom.groups {
                        gemm(
                            kr,
                            cog,
                            np,
                            1.0,
                            &w.data()[gi * cog * kr..],
                            (1, kr as isize),
                            &g[gi * cog * np..],
                            (np as isize, 1),
                            0.0,
                            &mut dcols[gi * kr * np..],
                            (np as isize, 1),
                        );
                    }
                    kernels::col2im(&dcols, geom)
                });
                vec![gx, gw]
            }
            Op::Softmax(axis) | Op::LogSoftmax(axis) => {
                let log = matches!(node.op, Op::LogSoftmax(_));
                let (outer, n, inner) = shape::split_at_axis(node.value.dims(), *axis);
                let mut r = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                r[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                r[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                vec![Some(r)]
            }
            Op::GroupNorm { groups, rstd } => {
                let gsize = y.len() / groups;
                let mut r = vec![0.0; y.len()];
                for gi in 0..*groups {
                    let rg = gi * gsize..(gi + 1) * gsize;
                    let (gg, yy) = (&g[rg.clone()], &y[rg.clone()]);
                    let mg = gg.iter().sum::<f64>() / gsize as f64;
                    let mgy = gg.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / gsize as f64;
                    for ((o, a), b) in r[rg].iter_mut().zip(gg).zip(yy) {
                        *o = rstd[gi] * (a - mg - b * mgy);
                    }
                }
                vec![Some(r)]
            }
            Op::AvgPool(k) => {
                let d = inp(0).dims();
                let (c, h, w) = (d[0], d[1], d[2]);
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut r = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            r[(ch * h + yy) * w + xx] = g[(ch * ho + yy / k) * wo + xx / k] * inv;
                        }
                    }
                }
                vec![Some(r)]
            }
            Op::UpsampleNearest(f) => {
                let d = inp(0).dims();
                let (c, h, w) = (d[0], d[1], d[2]);
                let (ho, wo) = (h * f, w * f);
                let mut r = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            r[(ch * h + yy / f) * w + xx / f] += g[(ch * ho + yy) * wo + xx];
                        }
                    }
                }
                vec![Some(r)]
            }
            Op::UpsampleBilinear(f) => {
                let d = inp(0).dims();
                let (c, h, w) = (d[0], d[1], d[2]);
                let (ty, tx) = (kernels::upsample_taps(h, *f), kernels::upsample_taps(w, *f));
                let (ho, wo) = (ty.len(), tx.len());
                let mut r = vec![0.0; c * h * w];
                for ch in 0..c {
                    let p = &mut r[ch * h * w..(ch + 1) * h * w];
                    for (yy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = g[(ch * ho + yy) * wo + xx];
                            p[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            p[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            p[y1 * w + x0] += gv * ly * (1.0 - lx);
                            p[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(r)]
            }
            Op::Concat { axis, sizes } => {
                let (outer, total, inner) = shape::split_at_axis(node.value.dims(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(sizes.len());
                for (k, &sz) in sizes.iter().enumerate() {
                    if needs[k] {
                        let mut r = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            r.extend_from_slice(&g[s..s + sz * inner]);
                        }
                        out.push(Some(r));
                    } else {
                        out.push(None);
                    }
                    offset += sz;
                }
                out
            }
            Op::Slice { axis, start } => {
                let d = inp(0).dims();
                let (outer, n, inner) = shape::split_at_axis(d, *axis);
                let len = node.value.dims()[*axis];
                let mut r = vec![0.0; numel(d)];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    r[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(r)]
            }
            Op::Permute(perm) => {
                let d = inp(0).dims();
                let st = shape::strides(d);
                let view: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let offs = shape::map_offsets(node.value.dims(), &view);
                let mut r = vec![0.0; numel(d)];
                for (i, &o) in offs.iter().enumerate() {
                    r[o] = g[i];
                }
                vec![Some(r)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Gather { axis, indices } => {
                let d = inp(0).dims();
                let (outer, n, inner) = shape::split_at_axis(d, *axis);
                let m = indices.len();
                let mut r = vec![0.0; numel(d)];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let s = (o * m + j) * inner;
                        let t = (o * n + i) * inner;
                        for q in 0..inner {
                            r[t + q] += g[s + q];
                        }
                    }
                }
                vec![Some(r)]
            }
            Op::ScatterAdd { axis, indices } => {
                let d = inp(0).dims();
                let (outer, m, inner) = shape::split_at_axis(d, *axis);
                let size = node.value.dims()[*axis];
                let mut r = Vec::with_capacity(numel(d));
                for o in 0..outer {
                    for &i in indices {
                        let s = (o * size + i) * inner;
                        r.extend_from_slice(&g[s..s + inner]);
                    }
                }
                debug_assert_eq!(r.len(), outer * m * inner);
                vec![Some(r)]
            }
            Op::CosineSimilarity { axis, eps } => {
                let (a, b) = (inp(0), inp(1));
                let (outer, n, inner) = shape::split_at_axis(a.dims(), *axis);
                let (xa, xb) = (a.data(), b.data());
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let (mut dot, mut na2, mut nb2) = (0.0, 0.0, 0.0);
                        for j in 0..n {
                            dot += xa[idx(j)] * xb[idx(j)];
                            na2 += xa[idx(j)] * xa[idx(j)];
                            nb2 += xb[idx(j)] * xb[idx(j)];
                        }
                        let gv = g[o * inner + i];
                        let denom = (na2 * nb2).sqrt();
                        if denom > *eps {
                            let cos = dot / denom;
                            for j in 0..n {
                                let k = idx(j);
                                ga[k] = gv * (xb[k] / denom - cos * xa[k] / na2);
                                gb[k] = gv * (xa[k] / denom - cos * xb[k] / nb2);
                            }
                        } else {
                            for j in 0..n {
                                let k = idx(j);
                                ga[k] = gv * xb[k] / eps;
                                gb[k] = gv * xa[k] / eps;
                            }
                        }
                    }
                }
                vec![needs[0].then_some(ga), needs[1].then_some(gb)]
            }
            Op::BilinearSample => {
                let (map, coords) = (inp(0), inp(1));
                let d = map.dims();
                let (c, h, w) = (d[0], d[1], d[2]);
                let n = coords.dims()[0];
                let (src, xy) = (map.data(), coords.data());
                let mut gm = vec![0.0; src.len()];
                let mut gc = vec![0.0; xy.len()];
                for p in 0..n {
                    let (x0, y0, wx, wy) = kernels::bilinear_taps(xy[2 * p], xy[2 * p + 1]);
                    for ch in 0..c {
                        let gv = g[ch * n + p];
                        let base = ch * h * w;
                        let plane = &src[base..base + h * w];
                        let v00 = kernels::read_or_zero(plane, h, w, y0, x0);
                        let v01 = kernels::read_or_zero(plane, h, w, y0, x0 + 1);
                        let v10 = kernels::read_or_zero(plane, h, w, y0 + 1, x0);
                        let v11 = kernels::read_or_zero(plane, h, w, y0 + 1, x0 + 1);
                        gc[2 * p] += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                        gc[2 * p + 1] += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                        let taps = [
                            (y0, x0, (1.0 - wy) * (1.0 - wx)),
                            (y0, x0 + 1, (1.0 - wy) * wx),
                            (y0 + 1, x0, wy * (1.0 - wx)),
                            (y0 + 1, x0 + 1, wy * wx),
                        ];
                        for (ty, tx, wt) in taps {
                            if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                                gm[base + ty as usize * w + tx as usize] += gv * wt;
                            }
                        }
                    }
                }
                vec![needs[0].then_some(gm), needs[1].then_some(gc)]
            }
            Op::Reduce { kind, axes, argmax } => {
                let d = inp(0).dims();
                let kept = shape::reduced_dims(d, axes);
                let nin = numel(d);
                match kind {
                    ReduceKind::Max => {
                        let mut r = vec![0.0; nin];
                        for (o, &i) in argmax.iter().enumerate() {
                            r[i] += g[o];
                        }
                        vec![Some(r)]
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let offs = shape::map_offsets(d, &shape::broadcast_strides(&kept, d));
                        let scale = if *kind == ReduceKind::Mean {
                            numel(&kept) as f64 / nin as f64
                        } else {
                            1.0
                        };
                        vec![Some(offs.iter().map(|&o| g[o] * scale).collect())]
                    }
                }
            }
        }
    }
}

fn binary_backward(
    op: &Op,
    a: &Tensor,
    b: &Tensor,
    out_dims: &[usize],
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (da, db) = (a.dims(), b.dims());
    let (xa, xb) = (a.data(), b.data());
    let n = g.len();
    let (oa, ob): (Vec<usize>, Vec<usize>) = if da == db {
        ((0..n).collect(), (0..n).collect())
    } else {
        (
            shape::map_offsets(out_dims, &shape::broadcast_strides(da, out_dims)),
            shape::map_offsets(out_dims, &shape::broadcast_strides(db, out_dims)),
        )
    };
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for i in 0..n {
        let (p, q, gv) = (xa[oa[i]], xb[ob[i]], g[i]);
        let (u, v) = match op {
            Op::Add => (gv, gv),
            Op::Sub => (gv, -gv),
            Op::Mul => (gv * q, gv * p),
            Op::Div => (gv / q, -gv * p / (q * q)),
            Op::Minimum => {
                if q < p {
                    (0.0, gv)
                } else {
                    (gv, 0.0)
                }
            }
            Op::Maximum => {
                if q > p {
                    (0.0, gv)
                } else {
                    (gv, 0.0)
                }
            }
            _ => unreachable!("not a binary op"),
        };
        ga[i] = u;
        gb[i] = v;
    }
    vec![
        needs[0].then(|| sum_to(&ga, out_dims, da)),
        needs[1].then(|| sum_to(&gb, out_dims, db)),
    ]
}
