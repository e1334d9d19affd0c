//! Dual top-down feature pyramid: clustering blocks per level, ASPP on the
//! vision side, IRC neck fusion into the radar side.

use vrnet_tensor::{Graph, ParamStore, Rng, Var};

use crate::aff::Irc;
use crate::coc::{CocBlock, StagePair};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvNormAct};

/// Parallel dilated 3×3 convolutions, concatenated and fused by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub branches: Vec<Conv>,
    pub fuse: Conv,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, rates: &[usize]) -> Self {
        let branches = rates
            .iter()
            .map(|&r| Conv::new(store, rng, &format!("{name}.rate{r}"), dim, dim, 3, r, r, true))
            .collect();
        let fuse = Conv::pointwise(store, rng, &format!("{name}.fuse"), dim, dim * rates.len(), true);
        Self { branches, fuse }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, store, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs, 0)?;
        self.fuse.forward(g, store, cat)
    }
}

/// Merge unit of one top-down level.
#[derive(Debug, Clone)]
pub enum LevelBlock {
    Cluster(CocBlock),
    Conv(ConvNormAct),
}

impl LevelBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            LevelBlock::Cluster(b) => b.forward(g, store, x),
            LevelBlock::Conv(c) => c.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeckConfig {
    pub dim: usize,
    pub heads: usize,
    /// Clustering grid per level, finest first.
    pub grids: Vec<usize>,
    pub aspp_rates: Vec<usize>,
    pub irc_groups: usize,
    /// Clustering blocks in the top-down path; otherwise conv-norm-act.
    pub coc_fpn: bool,
    pub neck_fusion: bool,
}

impl NeckConfig {
    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            grids: vec![4, 2, 2],
            aspp_rates: vec![1, 2, 4],
            irc_groups: 2,
            coc_fpn: true,
            neck_fusion: true,
        }
    }
}

/// Top-down path over the three coarsest stages of one branch.
#[derive(Debug, Clone)]
pub struct TopDown {
    pub laterals: Vec<Conv>,
    pub blocks: Vec<LevelBlock>,
}

impl TopDown {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dims: &[usize], cfg: &NeckConfig) -> Result<Self> {
        let mut laterals = Vec::new();
        let mut blocks = Vec::new();
        for (l, &d) in in_dims.iter().enumerate() {
            laterals.push(Conv::pointwise(store, rng, &format!("{name}.l{l}.lateral"), cfg.dim, d, true));
            let bname = format!("{name}.l{l}.block");
            blocks.push(if cfg.coc_fpn {
                LevelBlock::Cluster(CocBlock::new(store, rng, &bname, cfg.dim, cfg.heads, cfg.grids[l])?)
            } else {
                LevelBlock::Conv(ConvNormAct::new(store, rng, &bname, cfg.dim, cfg.dim, 1))
            });
        }
        Ok(Self { laterals, blocks })
    }

    /// Returns `(laterals, merged)` per level, finest first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, maps: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let lats = self
            .laterals
            .iter()
            .zip(maps)
            .map(|(c, &m)| c.forward(g, store, m))
            .collect::<Result<Vec<_>>>()?;
        let mut merged = vec![lats[0]; lats.len()];
        let mut above: Option<Var> = None;
        for l in (0..lats.len()).rev() {
            let x = match above {
                Some(t) => {
                    let up = g.upsample_nearest(t, 2)?;
                    g.add(lats[l], up)?
                }
                None => lats[l],
            };
            let t = self.blocks[l].forward(g, store, x)?;
            merged[l] = t;
            above = Some(t);
        }
        Ok((lats, merged))
    }
}

/// Per-level features at strides 8, 16, 32 (finest first).
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub vision: Vec<Var>,
    pub radar: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Fpn {
    pub cfg: NeckConfig,
    pub vision: TopDown,
    pub radar: TopDown,
    pub aspp: Vec<Aspp>,
    pub fusion: Vec<Irc>,
}

impl Fpn {
    /// `stage_dims` are the widths of the three coarsest backbone stages.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, stage_dims: &[usize], cfg: &NeckConfig) -> Result<Self> {
        if stage_dims.len() != cfg.grids.len() {
            return Err(Error::Config(format!(
                "neck: {} levels but {} grids",
                stage_dims.len(),
                cfg.grids.len()
            )));
        }
        let vision = TopDown::new(store, rng, "neck.vision", stage_dims, cfg)?;
        let radar = TopDown::new(store, rng, "neck.radar", stage_dims, cfg)?;
        let aspp = (0..stage_dims.len())
            .map(|l| Aspp::new(store, rng, &format!("neck.l{l}.aspp"), cfg.dim, &cfg.aspp_rates))
            .collect();
        let fusion = if cfg.neck_fusion {
            (0..stage_dims.len())
                .map(|l| Irc::new(store, rng, &format!("neck.l{l}.irc"), cfg.dim, cfg.irc_groups))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg: cfg.clone(),
            vision,
            radar,
            aspp,
            fusion,
        })
    }

    /// Consumes the stage pairs whose levels feed the pyramid (the last three).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stages: &[StagePair]) -> Result<Pyramid> {
        let levels = self.aspp.len();
        if stages.len() < levels {
            return Err(Error::Invalid(format!("neck: need {levels} stages, got {}", stages.len())));
        }
        let used = &stages[stages.len() - levels..];
        let vis_in: Vec<Var> = used.iter().map(|p| p.vision).collect();
        let rad_in: Vec<Var> = used.iter().map(|p| p.radar).collect();
        let (vis_lat, vis_td) = self.vision.forward(g, store, &vis_in)?;
        let (_, rad_td) = self.radar.forward(g, store, &rad_in)?;

        let mut vision = Vec::with_capacity(levels);
        for l in 0..levels {
            let a = self.aspp[l].forward(g, store, vis_td[l])?;
            vision.push(g.add(a, vis_lat[l])?);
        }
        let radar = if self.fusion.is_empty() {
            rad_td
        } else {
            (0..levels)
                .map(|l| self.fusion[l].forward(g, store, vision[l], rad_td[l]))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Pyramid { vision, radar })
    }
}
