//! Contextual-clustering backbone: position attachment, point reducer,
//! clustering blocks, radar prior attention and the dual-branch stage stack.

use vrnet_tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{self, Conv, Linear};

const COS_EPS: f64 = 1e-8;

/// Feature map viewed as `n = height·width` points; `features` is `[d, n]`.
#[derive(Debug, Clone, Copy)]
pub struct PointSet {
    pub features: Var,
    pub height: usize,
    pub width: usize,
}

impl PointSet {
    pub fn to_map(&self, g: &mut Graph) -> Result<Var> {
        let d = g.dims(self.features)[0];
        Ok(g.reshape(self.features, &[d, self.height, self.width])?)
    }
}

/// `[2, h·w]` with column `i·w + j` = `(i/w − 0.5, j/h − 0.5)`.
pub fn positions(h: usize, w: usize) -> Tensor {
    let n = h * w;
    Tensor::from_fn(vec![2, n], |k| {
        let (row, idx) = (k / n, k % n);
        let (i, j) = (idx / w, idx % w);
        if row == 0 {
            i as f64 / w as f64 - 0.5
        } else {
            j as f64 / h as f64 - 0.5
        }
    })
}

/// Appends the two position channels to a `[C,H,W]` map.
pub fn attach_positions(g: &mut Graph, map: Var) -> Result<PointSet> {
    let d = g.dims(map).to_vec();
    if d.len() != 3 {
        return Err(Error::Invalid(format!("attach_positions: expected [C,H,W], got {d:?}")));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let flat = g.reshape(map, &[c, h * w])?;
    let pos = g.constant(positions(h, w));
    let features = g.concat(&[flat, pos], 0)?;
    Ok(PointSet {
        features,
        height: h,
        width: w,
    })
}

/// Concatenates each non-overlapping `s×s` patch (members row-major) and projects it linearly.
#[derive(Debug, Clone)]
pub struct PointReducer {
    pub stride: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out, s²·in]`, column `m·in + c` reads channel `c` of patch member `m`.
    pub proj: Linear,
}

impl PointReducer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, stride: usize, in_dim: usize, out_dim: usize) -> Self {
        let k = stride * stride;
        Self {
            stride,
            in_dim,
            out_dim,
            proj: Linear::new(store, rng, name, out_dim, k * in_dim, true),
        }
    }

    /// Returns the reduced `[out, h/s, w/s]` map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pts: &PointSet) -> Result<Var> {
        let s = self.stride;
        if pts.height % s != 0 || pts.width % s != 0 {
            return Err(Error::Invalid(format!(
                "point_reduce: {}x{} not divisible by stride {s}",
                pts.height, pts.width
            )));
        }
        let map = pts.to_map(g)?;
        // A linear map of the patch concatenation is a stride-s convolution
        // whose kernel is the same weights reindexed as [out, in, s, s].
        let w = g.param(store, self.proj.w);
        let w = g.reshape(w, &[self.out_dim, s * s, self.in_dim])?;
        let w = g.permute(w, &[0, 2, 1])?;
        let w = g.reshape(w, &[self.out_dim, self.in_dim, s, s])?;
        let b = self.proj.b.map(|b| g.param(store, b));
        Ok(g.conv2d(map, w, b, s, 0, 1, 1)?)
    }
}

/// Grid means: center `m` averages the features of cell `m` (row-major) of a `g_c×g_c` grid.
pub fn propose_centers(g: &mut Graph, map: Var, grid: usize) -> Result<Var> {
    let d = g.dims(map).to_vec();
    let (c, h, w) = (d[0], d[1], d[2]);
    if grid == 0 || h % grid != 0 || w % grid != 0 || h / grid != w / grid {
        return Err(Error::Invalid(format!("propose_centers: grid {grid} does not tile {h}x{w} in square cells")));
    }
    let pooled = g.avg_pool(map, h / grid)?;
    Ok(g.reshape(pooled, &[c, grid * grid])?)
}

/// Index of the most cosine-similar center per point; ties go to the lowest index.
pub fn assign_to_centers(points: &[f64], centers: &[f64], d: usize, n: usize, m: usize) -> Vec<usize> {
    let norms_c: Vec<f64> = (0..m)
        .map(|j| (0..d).map(|k| centers[k * m + j].powi(2)).sum::<f64>())
        .collect();
    (0..n)
        .map(|i| {
            let np: f64 = (0..d).map(|k| points[k * n + i].powi(2)).sum();
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, nc) in norms_c.iter().enumerate() {
                let dot: f64 = (0..d).map(|k| points[k * n + i] * centers[k * m + j]).sum();
                let cos = dot / (np * nc).sqrt().max(COS_EPS);
                if cos > best.1 {
                    best = (j, cos);
                }
            }
            best.0
        })
        .collect()
}

/// Intermediate values of one head, for inspection and oracles.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub assignment: Vec<usize>,
    /// `[d/h, M]`
    pub centers: Var,
    /// `[d/h, M]`
    pub value_centers: Var,
    /// `[d/h, n]`
    pub values: Var,
    /// `[1, n]` cosine similarity of each point to its center.
    pub sims: Var,
    /// `[1, n]` σ(α·s + β).
    pub weights: Var,
    /// `[1, M]` normalization factor C.
    pub norm: Var,
    /// `[d/h, M]` aggregated cluster features.
    pub aggregated: Var,
}

#[derive(Debug, Clone)]
pub struct CocBlock {
    pub dim: usize,
    pub heads: usize,
    pub grid: usize,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub value_proj: Linear,
    pub head_w: Vec<ParamId>,
    pub out_proj: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CocBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize, grid: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: heads {heads} must divide dim {dim}")));
        }
        let dh = dim / heads;
        let alpha = store.add(format!("{name}.alpha"), Tensor::full(vec![1], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![1]));
        let value_proj = Linear::new(store, rng, &format!("{name}.value"), dim, dim, true);
        let head_w = (0..heads)
            .map(|i| store.add(format!("{name}.head{i}"), nn::identity(dh)))
            .collect();
        let out_proj = Linear {
            w: store.add(format!("{name}.out.w"), nn::identity(dim)),
            b: Some(store.add(format!("{name}.out.b"), Tensor::zeros(vec![dim]))),
        };
        let ff1 = Linear::new(store, rng, &format!("{name}.ff1"), dim, dim, true);
        let ff2 = Linear::new(store, rng, &format!("{name}.ff2"), dim, dim, true);
        Ok(Self {
            dim,
            heads,
            grid,
            alpha,
            beta,
            value_proj,
            head_w,
            out_proj,
            ff1,
            ff2,
        })
    }

    /// Zeroes the output layer of the dispatch feed-forward, making the block the identity.
    pub fn zero_dispatch(&self, store: &mut ParamStore) {
        self.ff2.zero(store);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, map)?.0)
    }

    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<(Var, Vec<HeadTrace>)> {
        let d = g.dims(map).to_vec();
        if d.len() != 3 || d[0] != self.dim {
            return Err(Error::Invalid(format!("coc block: expected [{}, H, W], got {d:?}", self.dim)));
        }
        let (h, w) = (d[1], d[2]);
        let n = h * w;
        let m = self.grid * self.grid;
        let dh = self.dim / self.heads;
        let p = g.reshape(map, &[self.dim, n])?;
        let v = self.value_proj.forward(g, store, p)?;
        let alpha = g.param(store, self.alpha);
        let beta = g.param(store, self.beta);

        let mut outs = Vec::with_capacity(self.heads);
        let mut traces = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let ph = g.slice(p, 0, i * dh, dh)?;
            let vh = g.slice(v, 0, i * dh, dh)?;
            let ph_map = g.reshape(ph, &[dh, h, w])?;
            let vh_map = g.reshape(vh, &[dh, h, w])?;
            let centers = propose_centers(g, ph_map, self.grid)?;
            let value_centers = propose_centers(g, vh_map, self.grid)?;
            let assignment = g.choice(|g| assign_to_centers(g.data(ph), g.data(centers), dh, n, m))?;

            let cg = g.gather(centers, 1, &assignment)?;
            let sims = g.cosine_similarity(ph, cg, 0, COS_EPS)?;
            let z = g.mul(sims, alpha)?;
            let z = g.add(z, beta)?;
            let weights = g.sigmoid(z);

            let wv = g.mul(vh, weights)?;
            let sum_wv = g.scatter_add(wv, 1, &assignment, m)?;
            let num = g.add(value_centers, sum_wv)?;
            let sum_w = g.scatter_add(weights, 1, &assignment, m)?;
            let norm = g.add_scalar(sum_w, 1.0);
            let aggregated = g.div(num, norm)?;

            let back = g.gather(aggregated, 1, &assignment)?;
            let dispatched = g.mul(back, weights)?;
            let hw = g.param(store, self.head_w[i]);
            outs.push(g.matmul(hw, dispatched)?);
            traces.push(HeadTrace {
                assignment,
                centers,
                value_centers,
                values: vh,
                sims,
                weights,
                norm,
                aggregated,
            });
        }
        let cat = g.concat(&outs, 0)?;
        let o = self.out_proj.forward(g, store, cat)?;
        let hdn = self.ff1.forward(g, store, o)?;
        let hdn = g.gelu(hdn);
        let delta = self.ff2.forward(g, store, hdn)?;
        let y = g.add(p, delta)?;
        Ok((g.reshape(y, &[self.dim, h, w])?, traces))
    }
}

/// Channel gate (ECA) followed by a deformable spatial gate on the radar raster.
#[derive(Debug, Clone)]
pub struct RadarPriorAttention {
    pub channels: usize,
    /// `[1, 1, 3]` conv over the channel axis.
    pub eca_w: ParamId,
    /// 3×3 conv emitting `(dx, dy)` for each of the 9 taps.
    pub offset: Conv,
    /// `[1, 9·C]` weights over the sampled taps, row index `c·9 + t`.
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    /// Doubles both gates so zero weights give a unit gate.
    pub gate_compensation: bool,
}

impl RadarPriorAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        let eca_w = store.add(format!("{name}.eca.w"), nn::fan_in_uniform(rng, vec![1, 1, 3], 3));
        let offset = Conv::new(store, rng, &format!("{name}.offset"), 18, channels, 3, 1, 1, true);
        offset.zero(store);
        let spatial_w = store.add(
            format!("{name}.spatial.w"),
            nn::fan_in_uniform(rng, vec![1, 9 * channels], 9 * channels),
        );
        let spatial_b = store.add(format!("{name}.spatial.b"), Tensor::zeros(vec![1]));
        Self {
            channels,
            eca_w,
            offset,
            spatial_w,
            spatial_b,
            gate_compensation: false,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        nn::fill(store, self.eca_w, 0.0);
        self.offset.zero(store);
        nn::fill(store, self.spatial_w, 0.0);
        nn::fill(store, self.spatial_b, 0.0);
    }

    fn gate(&self, g: &mut Graph, z: Var) -> Var {
        let s = g.sigmoid(z);
        if self.gate_compensation {
            g.scale(s, 2.0)
        } else {
            s
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let d = g.dims(x).to_vec();
        let (c, h, w) = (d[0], d[1], d[2]);
        let hw = h * w;

        let pooled = g.global_avg_pool(x)?;
        let pooled = g.reshape(pooled, &[1, c])?;
        let ew = g.param(store, self.eca_w);
        let z = g.conv1d(pooled, ew, 1)?;
        let z = g.reshape(z, &[c, 1, 1])?;
        let gate_c = self.gate(g, z);
        let xc = g.mul(x, gate_c)?;

        let off = self.offset.forward(g, store, xc)?;
        let off = g.reshape(off, &[9, 2, hw])?;
        let off = g.permute(off, &[0, 2, 1])?;
        let off = g.reshape(off, &[9 * hw, 2])?;
        let base = g.constant(Tensor::from_fn(vec![9 * hw, 2], |k| {
            let (row, axis) = (k / 2, k % 2);
            let (t, pix) = (row / hw, row % hw);
            let (ky, kx) = ((t / 3) as f64 - 1.0, (t % 3) as f64 - 1.0);
            if axis == 0 {
                (pix % w) as f64 + kx
            } else {
                (pix / w) as f64 + ky
            }
        }));
        let coords = g.add(base, off)?;
        let sampled = g.bilinear_sample(xc, coords)?;
        let sampled = g.reshape(sampled, &[c * 9, hw])?;
        let sw = g.param(store, self.spatial_w);
        let sb = g.param(store, self.spatial_b);
        let zs = g.linear(sw, sampled, Some(sb))?;
        let zs = g.reshape(zs, &[1, h, w])?;
        let gate_s = self.gate(g, zs);
        Ok(g.mul(xc, gate_s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub dims: Vec<usize>,
    pub strides: Vec<usize>,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub grids: Vec<usize>,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            dims: vec![16, 32, 64, 128],
            strides: vec![4, 2, 2, 2],
            blocks: vec![1, 1, 2, 1],
            heads: vec![2, 2, 4, 4],
            grids: vec![8, 4, 2, 2],
        }
    }

    pub fn paper() -> Self {
        Self {
            blocks: vec![2, 2, 6, 2],
            ..Self::desk()
        }
    }

    pub fn validate(&self, input: usize) -> Result<()> {
        let n = self.dims.len();
        if n == 0 || [self.strides.len(), self.blocks.len(), self.heads.len(), self.grids.len()] != [n; 4] {
            return Err(Error::Config("backbone lists must have equal nonzero length".into()));
        }
        let mut size = input;
        for s in 0..n {
            if self.strides[s] == 0 || size % self.strides[s] != 0 {
                return Err(Error::Config(format!("stage {s}: extent {size} not divisible by stride {}", self.strides[s])));
            }
            size /= self.strides[s];
            if self.heads[s] == 0 || self.dims[s] % self.heads[s] != 0 {
                return Err(Error::Config(format!("stage {s}: heads {} must divide dim {}", self.heads[s], self.dims[s])));
            }
            if self.grids[s] == 0 || size % self.grids[s] != 0 {
                return Err(Error::Config(format!("stage {s}: grid {} must divide extent {size}", self.grids[s])));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self, stage: usize) -> usize {
        self.strides[..=stage].iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub reducers: Vec<PointReducer>,
    pub blocks: Vec<Vec<CocBlock>>,
}

impl Branch {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_channels: usize, cfg: &BackboneConfig) -> Result<Self> {
        let mut reducers = Vec::new();
        let mut blocks = Vec::new();
        let mut prev = in_channels;
        for s in 0..cfg.dims.len() {
            let d = cfg.dims[s];
            reducers.push(PointReducer::new(store, rng, &format!("{name}.s{s}.reduce"), cfg.strides[s], prev + 2, d));
            let stage = (0..cfg.blocks[s])
                .map(|b| CocBlock::new(store, rng, &format!("{name}.s{s}.block{b}"), d, cfg.heads[s], cfg.grids[s]))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(stage);
            prev = d;
        }
        Ok(Self { reducers, blocks })
    }

    /// Runs stage `s` on a `[C,H,W]` map: attach positions, reduce, cluster.
    pub fn stage(&self, g: &mut Graph, store: &ParamStore, s: usize, map: Var) -> Result<Var> {
        let pts = attach_positions(g, map)?;
        let mut x = self.reducers[s].forward(g, store, &pts)?;
        for b in &self.blocks[s] {
            x = b.forward(g, store, x)?;
        }
        Ok(x)
    }

    pub fn blocks_total(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

/// Per-stage pair of `[d, h, w]` maps.
#[derive(Debug, Clone, Copy)]
pub struct StagePair {
    pub vision: Var,
    pub radar: Var,
}

/// Cross-branch exchange run after each stage.
pub trait FusionHook {
    fn fuse(&self, g: &mut Graph, store: &ParamStore, stage: usize, pair: StagePair) -> Result<StagePair>;
}

pub struct IdentityFusion;

impl FusionHook for IdentityFusion {
    fn fuse(&self, _: &mut Graph, _: &ParamStore, _: usize, pair: StagePair) -> Result<StagePair> {
        Ok(pair)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub vision: Branch,
    pub radar: Branch,
    pub prior: Option<RadarPriorAttention>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &BackboneConfig, prior_attention: bool) -> Result<Self> {
        let vision = Branch::new(store, rng, "backbone.vision", 3, cfg)?;
        let radar = Branch::new(store, rng, "backbone.radar", 4, cfg)?;
        let prior = prior_attention.then(|| RadarPriorAttention::new(store, rng, "backbone.prior", 4));
        Ok(Self {
            cfg: cfg.clone(),
            vision,
            radar,
            prior,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        revp: Var,
        hooks: &dyn FusionHook,
    ) -> Result<Vec<StagePair>> {
        let mut rad = match &self.prior {
            Some(p) => p.forward(g, store, revp)?,
            None => revp,
        };
        let mut img = image;
        let mut out = Vec::with_capacity(self.cfg.dims.len());
        for s in 0..self.cfg.dims.len() {
            let pair = StagePair {
                vision: self.vision.stage(g, store, s, img)?,
                radar: self.radar.stage(g, store, s, rad)?,
            };
            let fused = hooks.fuse(g, store, s, pair)?;
            img = fused.vision;
            rad = fused.radar;
            out.push(fused);
        }
        Ok(out)
    }
}
