//! Asymmetric fusion: IRC moves gated vision features into the radar branch,
//! RIM modulates the vision branch with normalized radar features.

use vrnet_tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::coc::{FusionHook, StagePair};
use crate::error::{Error, Result};
use crate::nn::{self, Conv};

pub const NORM_EPS: f64 = 1e-5;

/// Reshapes channels to `(groups, C/groups)`, transposes and flattens.
pub fn channel_shuffle(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let d = g.dims(x).to_vec();
    if d.len() != 3 || groups == 0 || d[0] % groups != 0 {
        return Err(Error::Invalid(format!("channel_shuffle: {groups} groups do not divide {d:?}")));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let y = g.reshape(x, &[groups, c / groups, h * w])?;
    let y = g.permute(y, &[1, 0, 2])?;
    Ok(g.reshape(y, &[c, h, w])?)
}

/// Inverse permutation of [`channel_shuffle`].
pub fn channel_unshuffle(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let c = g.dims(x)[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Invalid(format!("channel_unshuffle: {groups} groups do not divide {c}")));
    }
    channel_shuffle(g, x, c / groups)
}

#[derive(Debug, Clone)]
pub struct IrcGroup {
    /// `[c/2g, c/2g]` over pooled channels.
    pub channel_w: ParamId,
    pub channel_b: ParamId,
    /// 1×1 conv over the normalized spatial half.
    pub spatial: Conv,
}

#[derive(Debug, Clone)]
pub struct Irc {
    pub channels: usize,
    pub groups: Vec<IrcGroup>,
    /// Group count of the spatial-half normalization.
    pub norm_groups: usize,
    pub fuse: Conv,
}

impl Irc {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % (2 * groups) != 0 {
            return Err(Error::Config(format!("{name}: 2·{groups} must divide {channels}")));
        }
        let half = channels / (2 * groups);
        let groups = (0..groups)
            .map(|i| IrcGroup {
                channel_w: store.add(format!("{name}.g{i}.channel.w"), nn::fan_in_uniform(rng, vec![half, half], half)),
                channel_b: store.add(format!("{name}.g{i}.channel.b"), Tensor::zeros(vec![half])),
                spatial: Conv::pointwise(store, rng, &format!("{name}.g{i}.spatial"), half, half, true),
            })
            .collect();
        Ok(Self {
            channels,
            groups,
            norm_groups: 1,
            fuse: Conv::pointwise(store, rng, &format!("{name}.fuse"), channels, 2 * channels, true),
        })
    }

    /// Gated vision features `f_sc` before concatenation.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, f_img: Var) -> Result<Var> {
        let d = g.dims(f_img).to_vec();
        if d.len() != 3 || d[0] != self.channels {
            return Err(Error::Invalid(format!("irc: expected [{}, H, W], got {d:?}", self.channels)));
        }
        let (h, w) = (d[1], d[2]);
        let half = self.channels / (2 * self.groups.len());
        let mut parts = Vec::with_capacity(2 * self.groups.len());
        for (i, grp) in self.groups.iter().enumerate() {
            let xc = g.slice(f_img, 0, 2 * i * half, half)?;
            let xs = g.slice(f_img, 0, (2 * i + 1) * half, half)?;

            let pooled = g.global_avg_pool(xc)?;
            let pooled = g.reshape(pooled, &[half, 1])?;
            let cw = g.param(store, grp.channel_w);
            let cb = g.param(store, grp.channel_b);
            let zc = g.linear(cw, pooled, Some(cb))?;
            let zc = g.reshape(zc, &[half, 1, 1])?;
            let gc = g.sigmoid(zc);
            parts.push(g.mul(xc, gc)?);

            let normed = g.group_norm(xs, self.norm_groups, NORM_EPS)?;
            let zs = grp.spatial.forward(g, store, normed)?;
            let gs = g.sigmoid(zs);
            debug_assert_eq!(g.dims(gs), &[half, h, w]);
            parts.push(g.mul(xs, gs)?);
        }
        Ok(g.concat(&parts, 0)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_img: Var, f_rad: Var) -> Result<Var> {
        let (di, dr) = (g.dims(f_img).to_vec(), g.dims(f_rad).to_vec());
        if di != dr {
            return Err(Error::Invalid(format!("irc: shape mismatch {di:?} vs {dr:?}")));
        }
        let f_sc = self.attend(g, store, f_img)?;
        let cat = g.concat(&[f_sc, f_rad], 0)?;
        let mixed = channel_shuffle(g, cat, 2)?;
        let fused = self.fuse.forward(g, store, mixed)?;
        Ok(g.add(fused, f_rad)?)
    }
}

#[derive(Debug, Clone)]
pub struct Rim {
    pub channels: usize,
    pub proj: Conv,
    pub gamma: ParamId,
}

impl Rim {
    /// Zero-initialized: the module starts as the identity on the vision branch.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        let proj = Conv::pointwise(store, rng, &format!("{name}.proj"), channels, channels, true);
        proj.zero(store);
        let gamma = store.add(format!("{name}.gamma"), Tensor::zeros(vec![1]));
        Self { channels, proj, gamma }
    }

    /// `f̂ = InstanceNorm(W_r·f_rad + b_r)`.
    pub fn radar_gain(&self, g: &mut Graph, store: &ParamStore, f_rad: Var) -> Result<Var> {
        let z = self.proj.forward(g, store, f_rad)?;
        Ok(g.instance_norm(z, NORM_EPS)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_img: Var, f_rad: Var) -> Result<Var> {
        let (di, dr) = (g.dims(f_img).to_vec(), g.dims(f_rad).to_vec());
        if di != dr {
            return Err(Error::Invalid(format!("rim: shape mismatch {di:?} vs {dr:?}")));
        }
        let f_hat = self.radar_gain(g, store, f_rad)?;
        let gain = g.add_scalar(f_hat, 1.0);
        let modulated = g.mul(gain, f_img)?;
        let gamma = g.param(store, self.gamma);
        let bias = g.mul(f_hat, gamma)?;
        Ok(g.add(modulated, bias)?)
    }
}

/// Per-stage IRC and RIM units; either side can be disabled.
#[derive(Debug, Clone)]
pub struct AffFusion {
    pub irc: Vec<Option<Irc>>,
    pub rim: Vec<Option<Rim>>,
}

impl AffFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        dims: &[usize],
        irc_groups: usize,
        use_irc: bool,
        use_rim: bool,
    ) -> Result<Self> {
        let mut irc = Vec::with_capacity(dims.len());
        let mut rim = Vec::with_capacity(dims.len());
        for (s, &d) in dims.iter().enumerate() {
            irc.push(if use_irc {
                Some(Irc::new(store, rng, &format!("fusion.s{s}.irc"), d, irc_groups)?)
            } else {
                None
            });
            rim.push(use_rim.then(|| Rim::new(store, rng, &format!("fusion.s{s}.rim"), d)));
        }
        Ok(Self { irc, rim })
    }
}

impl FusionHook for AffFusion {
    fn fuse(&self, g: &mut Graph, store: &ParamStore, stage: usize, pair: StagePair) -> Result<StagePair> {
        // Both directions read the pre-fusion pair.
        let radar = match self.irc.get(stage).and_then(Option::as_ref) {
            Some(irc) => irc.forward(g, store, pair.vision, pair.radar)?,
            None => pair.radar,
        };
        let vision = match self.rim.get(stage).and_then(Option::as_ref) {
            Some(rim) => rim.forward(g, store, pair.vision, pair.radar)?,
            None => pair.vision,
        };
        Ok(StagePair { vision, radar })
    }
}
