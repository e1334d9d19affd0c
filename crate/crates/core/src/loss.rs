//! Detection and segmentation losses on a recorded label assignment.

use vrnet_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::heads::{self, DetectionOutput, LOG_SIZE_CLAMP};
use crate::simota::{simota_assign, GtBox};

const IOU_EPS: f64 = 1e-9;

/// The four sub-task losses, in the order `(cls, conf, seg, box)`.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub cls: Var,
    pub conf: Var,
    pub seg: Var,
    pub bbox: Var,
}

impl LossBundle {
    pub fn as_array(&self) -> [Var; 4] {
        [self.cls, self.conf, self.seg, self.bbox]
    }

    pub fn values(&self, g: &Graph) -> [f64; 4] {
        self.as_array().map(|v| g.value(v).item())
    }
}

const UNASSIGNED: usize = usize::MAX;

/// Runs label assignment as a recorded discrete choice so replays reuse it.
pub fn assign_recorded(g: &mut Graph, out: &DetectionOutput, gts: &[GtBox]) -> Result<Vec<Option<usize>>> {
    let raw = g.choice(|g| {
        let boxes = heads::decoded_boxes(g, out);
        let scores = heads::class_scores(g, out);
        simota_assign(&out.anchors, &boxes, &scores, gts)
            .anchor_gt
            .into_iter()
            .map(|a| a.unwrap_or(UNASSIGNED))
            .collect()
    })?;
    Ok(raw.into_iter().map(|a| (a != UNASSIGNED).then_some(a)).collect())
}

fn row(g: &mut Graph, values: Vec<f64>) -> Var {
    let n = values.len();
    g.constant(Tensor::new(vec![1, n], values).expect("row length matches"))
}

/// Differentiable IoU between predicted boxes `[x1,y1,x2,y2]` rows and constant targets.
fn iou_rows(g: &mut Graph, p: [Var; 4], t: [Var; 4]) -> Result<Var> {
    let ix1 = g.maximum(p[0], t[0])?;
    let iy1 = g.maximum(p[1], t[1])?;
    let ix2 = g.minimum(p[2], t[2])?;
    let iy2 = g.minimum(p[3], t[3])?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let pw = g.sub(p[2], p[0])?;
    let ph = g.sub(p[3], p[1])?;
    let pa = g.mul(pw, ph)?;
    let tw = g.sub(t[2], t[0])?;
    let th = g.sub(t[3], t[1])?;
    let ta = g.mul(tw, th)?;
    let union = g.add(pa, ta)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, IOU_EPS);
    Ok(g.div(inter, union)?)
}

/// `Σ softplus(x) − t·x`, the summed binary cross-entropy with logits.
fn bce_sum(g: &mut Graph, logits: Var, targets: Tensor) -> Result<Var> {
    let t = g.constant(targets);
    let sp = g.softplus(logits);
    let tx = g.mul(t, logits)?;
    let l = g.sub(sp, tx)?;
    Ok(g.sum(l))
}

/// Mean IoU loss, objectness and class BCE for a fixed assignment.
pub fn detection_losses(
    g: &mut Graph,
    out: &DetectionOutput,
    gts: &[GtBox],
    anchor_gt: &[Option<usize>],
) -> Result<(Var, Var, Var)> {
    let a = out.anchors.len();
    if anchor_gt.len() != a {
        return Err(Error::Invalid(format!("assignment covers {} of {a} anchors", anchor_gt.len())));
    }
    let pos: Vec<(usize, usize)> = anchor_gt
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (i, g)))
        .collect();
    let np = pos.len();
    let norm = np.max(1) as f64;

    let obj_t = Tensor::from_fn(vec![1, a], |i| if anchor_gt[i].is_some() { 1.0 } else { 0.0 });
    let conf = bce_sum(g, out.obj, obj_t)?;
    let conf = g.scale(conf, 1.0 / norm);

    if np == 0 {
        let zero_cls = g.scalar(0.0);
        let zero_box = g.scalar(0.0);
        return Ok((zero_cls, conf, zero_box));
    }
    let idx: Vec<usize> = pos.iter().map(|p| p.0).collect();
    let c = g.dims(out.cls)[0];
    let cls_p = g.gather(out.cls, 1, &idx)?;
    let cls_t = Tensor::from_fn(vec![c, np], |k| {
        let (ch, j) = (k / np, k % np);
        if gts[pos[j].1].class_id == ch {
            1.0
        } else {
            0.0
        }
    });
    let cls = bce_sum(g, cls_p, cls_t)?;
    let cls = g.scale(cls, 1.0 / norm);

    let reg_p = g.gather(out.reg, 1, &idx)?;
    let comps = g.split(reg_p, 0, 4)?;
    let stride = row(g, pos.iter().map(|p| out.anchors[p.0].stride as f64).collect());
    let ax = row(g, pos.iter().map(|p| out.anchors[p.0].x as f64).collect());
    let ay = row(g, pos.iter().map(|p| out.anchors[p.0].y as f64).collect());
    let cx = g.add(comps[0], ax)?;
    let cx = g.mul(cx, stride)?;
    let cy = g.add(comps[1], ay)?;
    let cy = g.mul(cy, stride)?;
    let lw = g.clamp(comps[2], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
    let lw = g.exp(lw);
    let hw = g.mul(lw, stride)?;
    let hw = g.scale(hw, 0.5);
    let lh = g.clamp(comps[3], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
    let lh = g.exp(lh);
    let hh = g.mul(lh, stride)?;
    let hh = g.scale(hh, 0.5);
    let p = [g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?];
    let t = [0, 1, 2, 3].map(|k| row(g, pos.iter().map(|p| gts[p.1].bbox[k]).collect()));
    let ious = iou_rows(g, p, t)?;
    let one_minus = g.neg(ious);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let bbox = g.mean(one_minus);
    Ok((cls, conf, bbox))
}

/// Mean per-pixel cross-entropy of `[K,H,W]` logits against a class raster.
pub fn segmentation_loss(g: &mut Graph, logits: Var, mask: &[u8]) -> Result<Var> {
    let d = g.dims(logits).to_vec();
    let (k, n) = (d[0], d[1] * d[2]);
    if mask.len() != n {
        return Err(Error::Invalid(format!("mask has {} pixels, logits {n}", mask.len())));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= k) {
        return Err(Error::Invalid(format!("mask class {bad} outside {k} logits")));
    }
    let flat = g.reshape(logits, &[k, n])?;
    let lsm = g.log_softmax(flat, 0)?;
    let onehot = g.constant(Tensor::from_fn(vec![k, n], |i| {
        if mask[i % n] as usize == i / n {
            1.0
        } else {
            0.0
        }
    }));
    let picked = g.mul(lsm, onehot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

pub fn compute_losses(
    g: &mut Graph,
    out: &DetectionOutput,
    seg_logits: Var,
    gts: &[GtBox],
    anchor_gt: &[Option<usize>],
    mask: &[u8],
) -> Result<LossBundle> {
    let (cls, conf, bbox) = detection_losses(g, out, gts, anchor_gt)?;
    let seg = segmentation_loss(g, seg_logits, mask)?;
    Ok(LossBundle { cls, conf, seg, bbox })
}
