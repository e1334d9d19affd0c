//! Finite-difference gradient checks of every differentiable block at small sizes.

use std::time::Instant;

use vrnet_tensor::{finite_diff_check, FdOptions, FdReport, Graph, ParamId, ParamStore, Rng, Tensor, TensorError, Var};

use crate::aff::{AffFusion, Irc, Rim};
use crate::coc::{attach_positions, Backbone, BackboneConfig, CocBlock, PointReducer, RadarPriorAttention, StagePair};
use crate::error::{Error, Result};
use crate::heads::{DetHead, SegHead};
use crate::loss;
use crate::mtl;
use crate::neck::{Aspp, Fpn, NeckConfig};
use crate::simota::GtBox;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: FdReport,
    pub seconds: f64,
}

impl SuiteCase {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.failures.is_empty() && self.report.max_rel_err <= tolerance
    }
}

pub const CASES: [&str; 12] = [
    "prior_attention",
    "point_reducer",
    "coc_block",
    "irc",
    "rim",
    "aspp",
    "fpn",
    "seg_head",
    "det_head",
    "uncertainty_combine",
    "manual_combine",
    "backbone",
];

fn rand_tensor(rng: &mut Rng, dims: Vec<usize>, scale: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.range(-scale, scale))
}

/// Overwrites every parameter registered after `from` with uniform noise.
fn randomize(store: &mut ParamStore, rng: &mut Rng, from: usize, scale: f64) {
    let ids: Vec<ParamId> = store.ids().skip(from).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.range(-scale, scale);
        }
    }
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let c = g.constant(r.clone());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn check<F>(store: &mut ParamStore, opts: &FdOptions, f: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let wrapped = |g: &mut Graph, s: &ParamStore| {
        f(g, s).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::External(other.to_string()),
        })
    };
    Ok(finite_diff_check(store, wrapped, opts)?)
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        dims: vec![4, 8, 8, 8],
        strides: vec![2, 2, 2, 1],
        blocks: vec![1, 1, 1, 1],
        heads: vec![2, 2, 2, 2],
        grids: vec![2, 1, 1, 1],
    }
}

pub fn run_case(name: &str, opts: &FdOptions) -> Result<FdReport> {
    let mut rng = Rng::new(opts.seed ^ 0x5eed);
    let mut store = ParamStore::new();
    match name {
        "prior_attention" => {
            let x = store.add("input", rand_tensor(&mut rng, vec![4, 8, 8], 1.0));
            let m = RadarPriorAttention::new(&mut store, &mut rng, "prior", 4);
            randomize(&mut store, &mut rng, 1, 0.4);
            let r = rand_tensor(&mut rng, vec![4, 8, 8], 1.0);
            check(&mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let y = m.forward(g, s, xv)?;
                project(g, y, &r)
            })
        }
        "point_reducer" => {
            let x = store.add("input", rand_tensor(&mut rng, vec![3, 8, 8], 1.0));
            let m = PointReducer::new(&mut store, &mut rng, "reduce", 2, 5, 6);
            let r = rand_tensor(&mut rng, vec![6, 4, 4], 1.0);
            check(&mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let pts = attach_positions(g, xv)?;
                let y = m.forward(g, s, &pts)?;
                project(g, y, &r)
            })
        }
        "coc_block" => {
            let x = store.add("input", rand_tensor(&mut rng, vec![8, 8, 8], 1.0));
            let m = CocBlock::new(&mut store, &mut rng, "coc", 8, 2, 2)?;
            randomize(&mut store, &mut rng, 1, 0.5);
            let r = rand_tensor(&mut rng, vec![8, 8, 8], 1.0);
            check(&mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let y = m.forward(g, s, xv)?;
                project(g, y, &r)
            })
        }
        "irc" => {
            let a = store.add("vision", rand_tensor(&mut rng, vec![8, 4, 4], 1.0));
            let b = store.add("radar", rand_tensor(&mut rng, vec![8, 4, 4], 1.0));
            let m = Irc::new(&mut store, &mut rng, "irc", 8, 2)?;
            randomize(&mut store, &mut rng, 2, 0.5);
            let r = rand_tensor(&mut rng, vec![8, 4, 4], 1.0);
            check(&mut store, opts, |g, s| {
                let (av, bv) = (g.param(s, a), g.param(s, b));
                let y = m.forward(g, s, av, bv)?;
                project(g, y, &r)
            })
        }
        "rim" => {
            let a = store.add("vision", rand_tensor(&mut rng, vec![8, 4, 4], 1.0));
            let b = store.add("radar", rand_tensor(&mut rng, vec![8, 4, 4], 1.0));
            let m = Rim::new(&mut store, &mut rng, "rim", 8);
            randomize(&mut store, &mut rng, 2, 0.5);
            let r = rand_tensor(&mut rng, vec![8, 4, 4], 1.0);
            check(&mut store, opts, |g, s| {
                let (av, bv) = (g.param(s, a), g.param(s, b));
                let y = m.forward(g, s, av, bv)?;
                project(g, y, &r)
            })
        }
        "aspp" => {
            let x = store.add("input", rand_tensor(&mut rng, vec![8, 8, 8], 1.0));
            let m = Aspp::new(&mut store, &mut rng, "aspp", 8, &[1, 2, 4]);
            let r = rand_tensor(&mut rng, vec![8, 8, 8], 1.0);
            check(&mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let y = m.forward(g, s, xv)?;
                project(g, y, &r)
            })
        }
        "fpn" => {
            let extents = [8usize, 4, 2];
            let inputs: Vec<(ParamId, ParamId)> = extents
                .iter()
                .enumerate()
                .map(|(l, &e)| {
                    (
                        store.add(format!("vision{l}"), rand_tensor(&mut rng, vec![8, e, e], 1.0)),
                        store.add(format!("radar{l}"), rand_tensor(&mut rng, vec![8, e, e], 1.0)),
                    )
                })
                .collect();
            let cfg = NeckConfig {
                dim: 8,
                heads: 2,
                grids: vec![2, 2, 1],
                aspp_rates: vec![1, 2],
                irc_groups: 2,
                coc_fpn: true,
                neck_fusion: true,
            };
            let m = Fpn::new(&mut store, &mut rng, &[8, 8, 8], &cfg)?;
            randomize(&mut store, &mut rng, 6, 0.5);
            let rs: Vec<Tensor> = extents
                .iter()
                .flat_map(|&e| [0, 1].map(|_| e))
                .map(|e| rand_tensor(&mut rng, vec![8, e, e], 1.0))
                .collect();
            check(&mut store, opts, |g, s| {
                let stages: Vec<StagePair> = inputs
                    .iter()
                    .map(|&(v, r)| StagePair {
                        vision: g.param(s, v),
                        radar: g.param(s, r),
                    })
                    .collect();
                let p = m.forward(g, s, &stages)?;
                let mut total = g.scalar(0.0);
                for l in 0..3 {
                    let a = project(g, p.vision[l], &rs[2 * l])?;
                    let b = project(g, p.radar[l], &rs[2 * l + 1])?;
                    total = g.add(total, a)?;
                    total = g.add(total, b)?;
                }
                Ok(total)
            })
        }
        "seg_head" => {
            let x = store.add("input", rand_tensor(&mut rng, vec![8, 4, 4], 1.0));
            let m = SegHead::new(&mut store, &mut rng, 8, 8, 5, 2);
            let mask: Vec<u8> = (0..64).map(|_| rng.below(5) as u8).collect();
            check(&mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let y = m.forward(g, s, xv)?;
                loss::segmentation_loss(g, y, &mask)
            })
        }
        "det_head" => {
            let a = store.add("level0", rand_tensor(&mut rng, vec![8, 4, 4], 1.0));
            let b = store.add("level1", rand_tensor(&mut rng, vec![8, 2, 2], 1.0));
            let m = DetHead::new(&mut store, &mut rng, 8, 8, 3, &[8, 16], true);
            randomize(&mut store, &mut rng, 2, 0.3);
            let gts = vec![
                GtBox { class_id: 1, bbox: [3.0, 5.0, 17.0, 21.0] },
                GtBox { class_id: 2, bbox: [14.0, 9.0, 30.0, 27.5] },
            ];
            check(&mut store, opts, |g, s| {
                let maps = [g.param(s, a), g.param(s, b)];
                let out = m.forward(g, s, &maps)?;
                let assign = loss::assign_recorded(g, &out, &gts)?;
                let (cls, conf, bbox) = loss::detection_losses(g, &out, &gts, &assign)?;
                let t = g.add(cls, conf)?;
                let t2 = g.scale(bbox, 3.0);
                Ok(g.add(t, t2)?)
            })
        }
        "uncertainty_combine" => {
            let ls: Vec<ParamId> = (0..4)
                .map(|k| store.add(format!("loss{k}"), Tensor::full(vec![1], rng.range(0.1, 3.0))))
                .collect();
            let s_id = store.add("log_var", rand_tensor(&mut rng, vec![4], 1.0));
            check(&mut store, opts, |g, s| {
                let l = [0, 1, 2, 3].map(|k| g.param(s, ls[k]));
                let sv = g.param(s, s_id);
                mtl::uncertainty_combine(g, l, sv)
            })
        }
        "manual_combine" => {
            let ls: Vec<ParamId> = (0..4)
                .map(|k| store.add(format!("loss{k}"), Tensor::full(vec![1], rng.range(0.1, 3.0))))
                .collect();
            check(&mut store, opts, |g, s| {
                let l = [0, 1, 2, 3].map(|k| g.param(s, ls[k]));
                let t = mtl::manual_combine(g, l, [0.25, 0.5, 0.0, 1.0])?;
                Ok(g.sum(t))
            })
        }
        "backbone" => {
            let img = store.add("image", Tensor::from_fn(vec![3, 8, 8], |_| rng.uniform()));
            let rad = store.add("revp", Tensor::from_fn(vec![4, 8, 8], |_| rng.uniform()));
            let cfg = small_backbone();
            let bb = Backbone::new(&mut store, &mut rng, &cfg, true)?;
            let fusion = AffFusion::new(&mut store, &mut rng, &cfg.dims, 1, true, true)?;
            randomize(&mut store, &mut rng, 2, 0.5);
            let rs: Vec<Tensor> = [(4, 4), (8, 2), (8, 1), (8, 1)]
                .iter()
                .flat_map(|&(d, e)| [0, 1].map(|_| (d, e)))
                .map(|(d, e)| rand_tensor(&mut rng, vec![d, e, e], 1.0))
                .collect();
            check(&mut store, opts, |g, s| {
                let (iv, rv) = (g.param(s, img), g.param(s, rad));
                let stages = bb.forward(g, s, iv, rv, &fusion)?;
                let mut total = g.scalar(0.0);
                for (k, st) in stages.iter().enumerate() {
                    let a = project(g, st.vision, &rs[2 * k])?;
                    let b = project(g, st.radar, &rs[2 * k + 1])?;
                    total = g.add(total, a)?;
                    total = g.add(total, b)?;
                }
                Ok(total)
            })
        }
        other => Err(Error::Invalid(format!("unknown gradient case '{other}'"))),
    }
}

pub fn run_suite(opts: &FdOptions) -> Result<Vec<SuiteCase>> {
    CASES
        .iter()
        .map(|&name| {
            let t0 = Instant::now();
            let report = run_case(name, opts)?;
            Ok(SuiteCase {
                name,
                report,
                seconds: t0.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
