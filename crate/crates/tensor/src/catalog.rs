//! String-addressed dispatch over the differentiable op catalog.

use std::str::FromStr;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, ReduceKind, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Linear,
    Conv2d,
    Conv1d,
    Sigmoid,
    Relu,
    Gelu,
    Softmax,
    GroupNorm,
    InstanceNorm,
    GlobalAvgPool,
    AvgPool,
    UpsampleNearest,
    UpsampleBilinear,
    Concat,
    Split,
    Permute,
    Reshape,
    Gather,
    ScatterAdd,
    CosineSimilarity,
    BilinearSample,
    ReduceSum,
    ReduceMean,
    ReduceMax,
    Clamp,
    Exp,
    Log,
}

impl OpKind {
    pub const ALL: [OpKind; 32] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::Conv1d,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::GroupNorm,
        OpKind::InstanceNorm,
        OpKind::GlobalAvgPool,
        OpKind::AvgPool,
        OpKind::UpsampleNearest,
        OpKind::UpsampleBilinear,
        OpKind::Concat,
        OpKind::Split,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Gather,
        OpKind::ScatterAdd,
        OpKind::CosineSimilarity,
        OpKind::BilinearSample,
        OpKind::ReduceSum,
        OpKind::ReduceMean,
        OpKind::ReduceMax,
        OpKind::Clamp,
        OpKind::Exp,
        OpKind::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv1d => "conv1d",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::GroupNorm => "group_norm",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::AvgPool => "avg_pool",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::ScatterAdd => "scatter_add",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceMax => "reduce_max",
            OpKind::Clamp => "clamp",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
        }
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Optional attributes; each op reads the ones it needs.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub axes: Option<Vec<usize>>,
    pub keepdim: bool,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub dilation: Option<usize>,
    pub groups: Option<usize>,
    pub grid: Option<usize>,
    pub factor: Option<usize>,
    pub parts: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub indices: Option<Vec<usize>>,
    pub size: Option<usize>,
    pub eps: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

fn need<T: Clone>(v: &Option<T>, op: OpKind, attr: &str) -> Result<T> {
    v.clone().ok_or_else(|| TensorError::BadAttr {
        op: op.name().to_string(),
        attr: attr.to_string(),
    })
}

fn arity(op: OpKind, inputs: &[Var], n: usize) -> Result<()> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(TensorError::BadAttr {
            op: op.name().to_string(),
            attr: format!("expected {n} inputs, got {}", inputs.len()),
        })
    }
}

impl Graph {
    /// Applies `kind` to `inputs`. Returns several outputs only for `split`.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &Attrs) -> Result<Vec<Var>> {
        use OpKind as K;
        let one = |v: Var| Ok(vec![v]);
        match kind {
            K::Add | K::Sub | K::Mul | K::Div | K::Matmul | K::CosineSimilarity | K::BilinearSample => {
                arity(kind, inputs, 2)?;
                let (a, b) = (inputs[0], inputs[1]);
                one(match kind {
                    K::Add => self.add(a, b)?,
                    K::Sub => self.sub(a, b)?,
                    K::Mul => self.mul(a, b)?,
                    K::Div => self.div(a, b)?,
                    K::Matmul => self.matmul(a, b)?,
                    K::CosineSimilarity => {
                        self.cosine_similarity(a, b, need(&attrs.axis, kind, "axis")?, attrs.eps.unwrap_or(1e-8))?
                    }
                    _ => self.bilinear_sample(a, b)?,
                })
            }
            K::Linear => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return arity(kind, inputs, 3).map(|_| vec![]);
                }
                one(self.linear(inputs[0], inputs[1], inputs.get(2).copied())?)
            }
            K::Conv2d => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return arity(kind, inputs, 3).map(|_| vec![]);
                }
                one(self.conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride.unwrap_or(1),
                    attrs.padding.unwrap_or(0),
                    attrs.dilation.unwrap_or(1),
                    attrs.groups.unwrap_or(1),
                )?)
            }
            K::Conv1d => {
                arity(kind, inputs, 2)?;
                one(self.conv1d(inputs[0], inputs[1], attrs.padding.unwrap_or(0))?)
            }
            K::Concat => one(self.concat(inputs, need(&attrs.axis, kind, "axis")?)?),
            _ => {
                arity(kind, inputs, 1)?;
                let x = inputs[0];
                match kind {
                    K::Sigmoid => one(self.sigmoid(x)),
                    K::Relu => one(self.relu(x)),
                    K::Gelu => one(self.gelu(x)),
                    K::Exp => one(self.exp(x)),
                    K::Log => one(self.log(x)),
                    K::Clamp => one(self.clamp(x, need(&attrs.min, kind, "min")?, need(&attrs.max, kind, "max")?)),
                    K::Softmax => one(self.softmax(x, need(&attrs.axis, kind, "axis")?)?),
                    K::GroupNorm => one(self.group_norm(x, need(&attrs.groups, kind, "groups")?, attrs.eps.unwrap_or(1e-5))?),
                    K::InstanceNorm => one(self.instance_norm(x, attrs.eps.unwrap_or(1e-5))?),
                    K::GlobalAvgPool => one(self.global_avg_pool(x)?),
                    K::AvgPool => one(self.avg_pool(x, need(&attrs.grid, kind, "grid")?)?),
                    K::UpsampleNearest => one(self.upsample_nearest(x, need(&attrs.factor, kind, "factor")?)?),
                    K::UpsampleBilinear => one(self.upsample_bilinear(x, need(&attrs.factor, kind, "factor")?)?),
                    K::Split => self.split(x, need(&attrs.axis, kind, "axis")?, need(&attrs.parts, kind, "parts")?),
                    K::Permute => one(self.permute(x, &need(&attrs.dims, kind, "dims")?)?),
                    K::Reshape => one(self.reshape(x, &need(&attrs.dims, kind, "dims")?)?),
                    K::Gather => one(self.gather(x, need(&attrs.axis, kind, "axis")?, &need(&attrs.indices, kind, "indices")?)?),
                    K::ScatterAdd => one(self.scatter_add(
                        x,
                        need(&attrs.axis, kind, "axis")?,
                        &need(&attrs.indices, kind, "indices")?,
                        need(&attrs.size, kind, "size")?,
                    )?),
                    K::ReduceSum | K::ReduceMean | K::ReduceMax => {
                        let rk = match kind {
                            K::ReduceSum => ReduceKind::Sum,
                            K::ReduceMean => ReduceKind::Mean,
                            _ => ReduceKind::Max,
                        };
                        let axes = match &attrs.axes {
                            Some(a) => a.clone(),
                            None => (0..self.dims(x).len()).collect(),
                        };
                        one(self.reduce(x, rk, &axes, attrs.keepdim)?)
                    }
                    _ => unreachable!("multi-input kinds handled above"),
                }
            }
        }
    }

    /// Same as [`Graph::forward_op`] with the kind given by name.
    pub fn forward_named(&mut self, kind: &str, inputs: &[Var], attrs: &Attrs) -> Result<Vec<Var>> {
        let k: OpKind = kind.parse()?;
        self.forward_op(k, inputs, attrs)
    }
}
