//! Full network assembly and scene-to-tensor preparation.

use vrnet_tensor::{Graph, ParamStore, Rng, Tensor, Var};

use crate::aff::AffFusion;
use crate::coc::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::eval::{self, DetectionMetrics, ImageDetections, IouCounter, SegMetrics};
use crate::heads::{self, DetHead, Detection, DetectionOutput, SegHead};
use crate::neck::{Fpn, NeckConfig};
use crate::radar::NormRanges;
use crate::simota::GtBox;
use crate::synth::Scene;

/// Component switches; all on for the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablations {
    pub rim: bool,
    pub irc: bool,
    pub neck_fusion: bool,
    pub decoupled_head: bool,
    pub prior_attention: bool,
    pub multi_frame: bool,
    pub coc_fpn: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            rim: true,
            irc: true,
            neck_fusion: true,
            decoupled_head: true,
            prior_attention: true,
            multi_frame: true,
            coc_fpn: true,
        }
    }
}

impl Ablations {
    pub const NAMES: [&'static str; 7] = [
        "rim",
        "irc",
        "neck_fusion",
        "decoupled_head",
        "prior_attention",
        "multi_frame",
        "coc_fpn",
    ];

    pub fn flag_mut(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "rim" => &mut self.rim,
            "irc" => &mut self.irc,
            "neck_fusion" => &mut self.neck_fusion,
            "decoupled_head" => &mut self.decoupled_head,
            "prior_attention" => &mut self.prior_attention,
            "multi_frame" => &mut self.multi_frame,
            "coc_fpn" => &mut self.coc_fpn,
            other => return Err(Error::Config(format!("unknown ablation toggle '{other}'"))),
        })
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        let mut copy = *self;
        Ok(*copy.flag_mut(name)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Object classes; the segmentation raster adds background and drivable area.
    pub c_seg: usize,
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub irc_groups: usize,
    pub head_dim: usize,
    pub seg_hidden: usize,
    pub frames: usize,
    pub ablations: Ablations,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            c_seg: 3,
            backbone: BackboneConfig::desk(),
            neck: NeckConfig::desk(),
            irc_groups: 2,
            head_dim: 64,
            seg_hidden: 32,
            frames: 3,
            ablations: Ablations::default(),
            init_seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_size: 320,
            backbone: BackboneConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn seg_classes(&self) -> usize {
        self.c_seg + 2
    }

    /// Radar frames accumulated into the raster.
    pub fn revp_frames(&self) -> usize {
        if self.ablations.multi_frame {
            self.frames.max(1)
        } else {
            1
        }
    }

    pub fn level_strides(&self) -> Vec<usize> {
        let n = self.backbone.dims.len();
        (n - self.neck.grids.len()..n).map(|s| self.backbone.total_stride(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate(self.image_size)?;
        let n = self.backbone.dims.len();
        let levels = self.neck.grids.len();
        if levels == 0 || levels > n {
            return Err(Error::Config(format!("neck levels {levels} vs {n} stages")));
        }
        for (l, s) in (n - levels..n).enumerate() {
            let extent = self.image_size / self.backbone.total_stride(s);
            if self.neck.grids[l] == 0 || extent % self.neck.grids[l] != 0 {
                return Err(Error::Config(format!("neck grid {} does not divide extent {extent}", self.neck.grids[l])));
            }
        }
        if (n - levels + 1..n).any(|s| self.backbone.strides[s] != 2) {
            return Err(Error::Config("pyramid levels must be spaced by stride 2".into()));
        }
        if self.c_seg == 0 || self.c_seg + 2 > u8::MAX as usize {
            return Err(Error::Config(format!("c_seg {} out of range", self.c_seg)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub fusion: AffFusion,
    pub neck: Fpn,
    pub seg: SegHead,
    pub det: DetHead,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub det: DetectionOutput,
    /// `[C_seg+2, H, W]`
    pub seg_logits: Var,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.init_seed);
        let ab = cfg.ablations;
        let backbone = Backbone::new(store, &mut rng, &cfg.backbone, ab.prior_attention)?;
        let fusion = AffFusion::new(store, &mut rng, &cfg.backbone.dims, cfg.irc_groups, ab.irc, ab.rim)?;
        let neck_cfg = NeckConfig {
            coc_fpn: ab.coc_fpn,
            neck_fusion: ab.neck_fusion,
            irc_groups: cfg.irc_groups,
            ..cfg.neck.clone()
        };
        let n = cfg.backbone.dims.len();
        let levels = neck_cfg.grids.len();
        let neck = Fpn::new(store, &mut rng, &cfg.backbone.dims[n - levels..], &neck_cfg)?;
        let strides = cfg.level_strides();
        let seg = SegHead::new(store, &mut rng, neck_cfg.dim, cfg.seg_hidden, cfg.seg_classes(), strides[0]);
        let det = DetHead::new(
            store,
            &mut rng,
            neck_cfg.dim,
            cfg.head_dim,
            cfg.c_seg,
            &strides,
            ab.decoupled_head,
        );
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            fusion,
            neck,
            seg,
            det,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, revp: &Tensor) -> Result<ModelOutput> {
        let s = self.cfg.image_size;
        if image.dims() != [3, s, s] || revp.dims() != [4, s, s] {
            return Err(Error::Invalid(format!(
                "model expects [3,{s},{s}] image and [4,{s},{s}] radar raster, got {:?} and {:?}",
                image.dims(),
                revp.dims()
            )));
        }
        let img = g.constant(image.clone());
        let rad = g.constant(revp.clone());
        let stages = self.backbone.forward(g, store, img, rad, &self.fusion)?;
        let pyr = self.neck.forward(g, store, &stages)?;
        let seg_logits = self.seg.forward(g, store, pyr.vision[0])?;
        let det = self.det.forward(g, store, &pyr.radar)?;
        Ok(ModelOutput { det, seg_logits })
    }
}

/// Network inputs and targets of one scene.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub revp: Tensor,
    pub gts: Vec<GtBox>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn from_scene(scene: &Scene, frames: usize, norm: &NormRanges) -> Result<Self> {
        let (h, w) = (scene.height, scene.width);
        let revp = scene.revp(frames, norm)?;
        Ok(Self {
            image: Tensor::new(vec![3, h, w], scene.image.clone())?,
            revp: Tensor::new(vec![4, h, w], revp.channels)?,
            gts: scene
                .boxes
                .iter()
                .map(|b| GtBox {
                    class_id: b.class_id,
                    bbox: b.to_xyxy(w, h),
                })
                .collect(),
            mask: scene.sem_mask.clone(),
        })
    }
}

/// Post-processed detections and argmax segmentation of one sample.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub mask: Vec<u8>,
}

impl Model {
    pub fn predict(&self, store: &ParamStore, image: &Tensor, revp: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, image, revp)?;
        let s = self.cfg.image_size as f64;
        let raw = heads::decode_detections(&g, &out.det, s, s, eval::SCORE_FLOOR);
        Ok(Prediction {
            detections: eval::postprocess(&raw),
            mask: eval::argmax_mask(g.data(out.seg_logits), self.cfg.seg_classes()),
        })
    }

    /// Detection and segmentation metrics over `samples`.
    pub fn evaluate(&self, store: &ParamStore, samples: &[Sample]) -> Result<(DetectionMetrics, SegMetrics)> {
        let mut images = Vec::with_capacity(samples.len());
        let mut counter = IouCounter::new(self.cfg.seg_classes());
        for s in samples {
            let p = self.predict(store, &s.image, &s.revp)?;
            counter.add(&p.mask, &s.mask);
            images.push(ImageDetections {
                preds: p.detections,
                gts: s.gts.clone(),
            });
        }
        Ok((eval::eval_map(&images, self.cfg.c_seg), counter.metrics(self.cfg.c_seg)))
    }
}
