//! Parameterized layers shared by the backbone, neck and heads.

use vrnet_tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::Result;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut Rng, dims: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.range(-bound, bound))
}

pub fn identity(n: usize) -> Tensor {
    Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

pub fn fill(store: &mut ParamStore, id: ParamId, v: f64) {
    store.get_mut(id).data_mut().fill(v);
}

/// `W[out,in] @ X[in,n] + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(rng, vec![out, inp], inp));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.linear(w, x, b)?)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        fill(store, self.w, 0.0);
        if let Some(b) = self.b {
            fill(store, b, 0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        out: usize,
        inp: usize,
        k: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(rng, vec![out, inp, k, k], inp * k * k));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![out])));
        Self {
            w,
            b,
            stride: 1,
            padding,
            dilation,
        }
    }

    /// 1×1 convolution.
    pub fn pointwise(store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize, bias: bool) -> Self {
        Self::new(store, rng, name, out, inp, 1, 0, 1, bias)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.conv2d(x, w, b, self.stride, self.padding, self.dilation, 1)?)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        fill(store, self.w, 0.0);
        if let Some(b) = self.b {
            fill(store, b, 0.0);
        }
    }
}

/// Conv → group norm (no affine) → GELU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub groups: usize,
}

impl ConvNormAct {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize, groups: usize) -> Self {
        Self {
            conv: Conv::new(store, rng, name, out, inp, 3, 1, 1, false),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = g.group_norm(y, self.groups, 1e-5)?;
        Ok(g.gelu(y))
    }
}
