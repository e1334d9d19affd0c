//! Segmentation head on the vision pyramid and anchor-free detection head on
//! the radar pyramid.

use vrnet_tensor::{Graph, ParamStore, Rng, Var};

use crate::error::{Error, Result};
use crate::nn::{self, Conv, ConvNormAct};

/// Initial bias of objectness and class logits (σ ≈ 0.01).
pub const PRIOR_BIAS: f64 = -4.6;
/// Log-size outputs are clamped to this range before `exp`.
pub const LOG_SIZE_CLAMP: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct SegHead {
    pub layers: Vec<ConvNormAct>,
    pub classifier: Conv,
    pub upsample: usize,
}

impl SegHead {
    /// `classes` = object classes + background + drivable area.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, in_dim: usize, hidden: usize, classes: usize, upsample: usize) -> Self {
        let layers = vec![
            ConvNormAct::new(store, rng, "seg.cna0", hidden, in_dim, 1),
            ConvNormAct::new(store, rng, "seg.cna1", hidden, hidden, 1),
        ];
        let classifier = Conv::pointwise(store, rng, "seg.cls", classes, hidden, true);
        Self {
            layers,
            classifier,
            upsample,
        }
    }

    /// `[classes, H, W]` logits at input resolution.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, finest: Var) -> Result<Var> {
        let mut x = finest;
        for l in &self.layers {
            x = l.forward(g, store, x)?;
        }
        let logits = self.classifier.forward(g, store, x)?;
        Ok(g.upsample_bilinear(logits, self.upsample)?)
    }
}

#[derive(Debug, Clone)]
pub enum DetBranches {
    Decoupled { reg: Conv, cls: Conv },
    Coupled { shared: Conv },
}

#[derive(Debug, Clone)]
pub struct DetLevelHead {
    pub stem: Conv,
    pub branches: DetBranches,
    pub reg: Conv,
    pub obj: Conv,
    pub cls: Conv,
}

/// Raw per-level outputs.
#[derive(Debug, Clone, Copy)]
pub struct DetLevel {
    /// `[4, h, w]`: `(dx, dy)` cell offsets, `(dw, dh)` log sizes.
    pub reg: Var,
    /// `[1, h, w]`
    pub obj: Var,
    /// `[C, h, w]`
    pub cls: Var,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub stride: usize,
}

impl Anchor {
    /// Pixel center of the cell.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x as f64 + 0.5) * self.stride as f64,
            (self.y as f64 + 0.5) * self.stride as f64,
        )
    }
}

/// All levels flattened along the anchor axis, level-major then row-major.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub levels: Vec<DetLevel>,
    pub anchors: Vec<Anchor>,
    /// `[4, A]`
    pub reg: Var,
    /// `[1, A]`
    pub obj: Var,
    /// `[C, A]`
    pub cls: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone)]
pub struct DetHead {
    pub classes: usize,
    pub levels: Vec<DetLevelHead>,
    pub strides: Vec<usize>,
}

impl DetHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        strides: &[usize],
        decoupled: bool,
    ) -> Self {
        let levels = strides
            .iter()
            .enumerate()
            .map(|(l, _)| {
                let p = format!("det.l{l}");
                let stem = Conv::pointwise(store, rng, &format!("{p}.stem"), hidden, in_dim, true);
                let branches = if decoupled {
                    DetBranches::Decoupled {
                        reg: Conv::new(store, rng, &format!("{p}.reg_branch"), hidden, hidden, 3, 1, 1, true),
                        cls: Conv::new(store, rng, &format!("{p}.cls_branch"), hidden, hidden, 3, 1, 1, true),
                    }
                } else {
                    DetBranches::Coupled {
                        shared: Conv::new(store, rng, &format!("{p}.branch"), hidden, hidden, 3, 1, 1, true),
                    }
                };
                let reg = Conv::pointwise(store, rng, &format!("{p}.reg"), 4, hidden, true);
                let obj = Conv::pointwise(store, rng, &format!("{p}.obj"), 1, hidden, true);
                let cls = Conv::pointwise(store, rng, &format!("{p}.cls"), classes, hidden, true);
                for b in [obj.b, cls.b].into_iter().flatten() {
                    nn::fill(store, b, PRIOR_BIAS);
                }
                DetLevelHead {
                    stem,
                    branches,
                    reg,
                    obj,
                    cls,
                }
            })
            .collect();
        Self {
            classes,
            levels,
            strides: strides.to_vec(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, maps: &[Var]) -> Result<DetectionOutput> {
        if maps.len() != self.levels.len() {
            return Err(Error::Invalid(format!("det head: {} levels, got {}", self.levels.len(), maps.len())));
        }
        let mut levels = Vec::with_capacity(maps.len());
        let mut anchors = Vec::new();
        let (mut regs, mut objs, mut clss) = (Vec::new(), Vec::new(), Vec::new());
        for (l, (head, &m)) in self.levels.iter().zip(maps).enumerate() {
            let s = head.stem.forward(g, store, m)?;
            let s = g.gelu(s);
            let (rf, cf) = match &head.branches {
                DetBranches::Decoupled { reg, cls } => {
                    let r = reg.forward(g, store, s)?;
                    let c = cls.forward(g, store, s)?;
                    (g.gelu(r), g.gelu(c))
                }
                DetBranches::Coupled { shared } => {
                    let r = shared.forward(g, store, s)?;
                    let r = g.gelu(r);
                    (r, r)
                }
            };
            let reg = head.reg.forward(g, store, rf)?;
            let obj = head.obj.forward(g, store, rf)?;
            let cls = head.cls.forward(g, store, cf)?;
            let d = g.dims(m).to_vec();
            let (h, w) = (d[1], d[2]);
            let stride = self.strides[l];
            for y in 0..h {
                for x in 0..w {
                    anchors.push(Anchor { level: l, x, y, stride });
                }
            }
            regs.push(g.reshape(reg, &[4, h * w])?);
            objs.push(g.reshape(obj, &[1, h * w])?);
            clss.push(g.reshape(cls, &[self.classes, h * w])?);
            levels.push(DetLevel { reg, obj, cls, stride });
        }
        Ok(DetectionOutput {
            levels,
            anchors,
            reg: g.concat(&regs, 1)?,
            obj: g.concat(&objs, 1)?,
            cls: g.concat(&clss, 1)?,
        })
    }
}

/// `(cx, cy, w, h)` of an anchor's regression output.
pub fn decode_box(anchor: &Anchor, reg: [f64; 4]) -> (f64, f64, f64, f64) {
    let s = anchor.stride as f64;
    let [dx, dy, dw, dh] = reg;
    (
        (anchor.x as f64 + dx) * s,
        (anchor.y as f64 + dy) * s,
        dw.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp() * s,
        dh.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp() * s,
    )
}

/// Inverse of [`decode_box`] inside the clamp range.
pub fn encode_box(anchor: &Anchor, cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    let s = anchor.stride as f64;
    [cx / s - anchor.x as f64, cy / s - anchor.y as f64, (w / s).ln(), (h / s).ln()]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-anchor decoded boxes `[x1, y1, x2, y2]`, unclipped.
pub fn decoded_boxes(g: &Graph, out: &DetectionOutput) -> Vec<[f64; 4]> {
    let reg = g.data(out.reg);
    let a = out.anchors.len();
    out.anchors
        .iter()
        .enumerate()
        .map(|(i, an)| {
            let (cx, cy, w, h) = decode_box(an, [reg[i], reg[a + i], reg[2 * a + i], reg[3 * a + i]]);
            [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
        })
        .collect()
}

/// `σ(obj)·σ(cls)` per `[anchor][class]`.
pub fn class_scores(g: &Graph, out: &DetectionOutput) -> Vec<Vec<f64>> {
    let (obj, cls) = (g.data(out.obj), g.data(out.cls));
    let a = out.anchors.len();
    let c = g.dims(out.cls)[0];
    (0..a)
        .map(|i| {
            let so = sigmoid(obj[i]);
            (0..c).map(|k| so * sigmoid(cls[k * a + i])).collect()
        })
        .collect()
}

/// One detection per anchor (best class), clipped to the image, above `floor`.
pub fn decode_detections(g: &Graph, out: &DetectionOutput, width: f64, height: f64, floor: f64) -> Vec<Detection> {
    let boxes = decoded_boxes(g, out);
    class_scores(g, out)
        .into_iter()
        .zip(boxes)
        .filter_map(|(scores, b)| {
            let (class_id, &score) = scores
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            if score < floor {
                return None;
            }
            let x1 = b[0].clamp(0.0, width);
            let y1 = b[1].clamp(0.0, height);
            let x2 = b[2].clamp(0.0, width);
            let y2 = b[3].clamp(0.0, height);
            (x2 > x1 && y2 > y1).then_some(Detection {
                class_id,
                score,
                x1,
                y1,
                x2,
                y2,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offset_decode() {
        let a = Anchor { level: 0, x: 1, y: 1, stride: 8 };
        assert_eq!(decode_box(&a, [0.0; 4]), (8.0, 8.0, 8.0, 8.0));
    }

    #[test]
    fn encode_roundtrip() {
        let a = Anchor { level: 1, x: 3, y: 2, stride: 16 };
        let r = encode_box(&a, 41.0, 29.5, 12.0, 70.0);
        let (cx, cy, w, h) = decode_box(&a, r);
        assert!((cx - 41.0).abs() < 1e-9 && (cy - 29.5).abs() < 1e-9);
        assert!((w - 12.0).abs() < 1e-9 && (h - 70.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
