//! Detection (COCO-style AP/AR) and segmentation (IoU) metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::heads::Detection;
use crate::simota::{iou, GtBox};

pub const NMS_IOU: f64 = 0.65;
pub const SCORE_FLOOR: f64 = 0.01;
pub const MAX_DETECTIONS: usize = 100;
const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn det_box(d: &Detection) -> [f64; 4] {
    [d.x1, d.y1, d.x2, d.y2]
}

/// Score-descending order; ties keep input order.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

/// Class-wise greedy suppression, then the `max_det` best overall, score-sorted.
pub fn nms(dets: &[Detection], iou_thr: f64, floor: f64, max_det: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        let d = &dets[i];
        if d.score < floor {
            continue;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&det_box(k), &det_box(d)) > iou_thr);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept.truncate(max_det);
    kept
}

pub fn postprocess(dets: &[Detection]) -> Vec<Detection> {
    nms(dets, NMS_IOU, SCORE_FLOOR, MAX_DETECTIONS)
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct ImageDetections {
    pub preds: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// TP flags of the predictions of `class` at `thr`, in global score order, and the GT count.
fn match_class(images: &[ImageDetections], class: usize, thr: f64) -> (Vec<bool>, usize) {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (im, img) in images.iter().enumerate() {
        n_gt += img.gts.iter().filter(|g| g.class_id == class).count();
        let mut ranked: Vec<&Detection> = img.preds.iter().filter(|d| d.class_id == class).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        ranked.truncate(MAX_DETECTIONS);
        let mut used = vec![false; img.gts.len()];
        for d in ranked {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in img.gts.iter().enumerate() {
                if gt.class_id != class || used[gi] {
                    continue;
                }
                let v = iou(&det_box(d), &gt.bbox);
                if v >= thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
            }
            entries.push((d.score, im, best.is_some() as usize));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    (entries.iter().map(|e| e.2 == 1).collect(), n_gt)
}

/// 101-point interpolated AP and final recall of a ranked TP sequence.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> (f64, f64) {
    if n_gt == 0 {
        return (0.0, 0.0);
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let j = rec.partition_point(|&x| x < r);
        if j < prec.len() {
            sum += prec[j];
        }
    }
    (sum / RECALL_POINTS as f64, rec.last().copied().unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap_50_95: f64,
    pub ap_50: f64,
    pub ar_50_95: f64,
    pub ar_50: f64,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map_50_95: f64,
    pub map_50: f64,
    pub ar_50_95: f64,
    pub ar_50: f64,
    /// Classes that have ground truth.
    pub per_class: BTreeMap<usize, ClassMetrics>,
}

/// Means over classes with ground truth and over the ten IoU thresholds.
pub fn eval_map(images: &[ImageDetections], num_classes: usize) -> DetectionMetrics {
    let thr = iou_thresholds();
    let mut out = DetectionMetrics::default();
    for c in 0..num_classes {
        let mut aps = Vec::with_capacity(thr.len());
        let mut ars = Vec::with_capacity(thr.len());
        let mut has_gt = false;
        for &t in &thr {
            let (tp, n_gt) = match_class(images, c, t);
            has_gt = n_gt > 0;
            let (ap, ar) = ap_from_ranked(&tp, n_gt);
            aps.push(ap);
            ars.push(ar);
        }
        if !has_gt {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.per_class.insert(
            c,
            ClassMetrics {
                ap_50_95: mean(&aps),
                ap_50: aps[0],
                ar_50_95: mean(&ars),
                ar_50: ars[0],
                iou: None,
            },
        );
    }
    let n = out.per_class.len();
    if n > 0 {
        let avg = |f: fn(&ClassMetrics) -> f64| out.per_class.values().map(f).sum::<f64>() / n as f64;
        out.map_50_95 = avg(|m| m.ap_50_95);
        out.map_50 = avg(|m| m.ap_50);
        out.ar_50_95 = avg(|m| m.ar_50_95);
        out.ar_50 = avg(|m| m.ar_50);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou_o: f64,
    pub miou_d: f64,
    /// IoU per raster class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
}

/// Accumulated intersection and union pixel counts per raster class.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCounter {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub gt_pixels: Vec<u64>,
}

impl IouCounter {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
            gt_pixels: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) {
        assert_eq!(pred.len(), gt.len(), "mask sizes differ");
        for (&p, &t) in pred.iter().zip(gt) {
            let (p, t) = (p as usize, t as usize);
            self.gt_pixels[t] += 1;
            if p == t {
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                self.union[p] += 1;
            }
        }
    }

    pub fn iou(&self, class: usize) -> f64 {
        if self.union[class] == 0 {
            0.0
        } else {
            self.intersection[class] as f64 / self.union[class] as f64
        }
    }

    /// Object classes are `1..=c_seg`; the drivable class is `c_seg + 1`.
    pub fn metrics(&self, c_seg: usize) -> SegMetrics {
        let present: Vec<usize> = (1..=c_seg).filter(|&c| self.gt_pixels[c] > 0).collect();
        let miou_o = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| self.iou(c)).sum::<f64>() / present.len() as f64
        };
        let per_class = (0..self.union.len())
            .filter(|&c| self.gt_pixels[c] > 0)
            .map(|c| (c, self.iou(c)))
            .collect();
        SegMetrics {
            miou_o,
            miou_d: self.iou(c_seg + 1),
            per_class,
        }
    }
}

pub fn eval_miou(preds: &[Vec<u8>], gts: &[Vec<u8>], c_seg: usize) -> SegMetrics {
    let mut counter = IouCounter::new(c_seg + 2);
    for (p, g) in preds.iter().zip(gts) {
        counter.add(p, g);
    }
    counter.metrics(c_seg)
}

/// Per-pixel argmax of `[K, n]` channel-major logits; ties go to the lowest class.
pub fn argmax_mask(logits: &[f64], classes: usize) -> Vec<u8> {
    let n = logits.len() / classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if logits[k * n + i] > logits[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_50_95: f64,
    pub map_50: f64,
    pub ar_50_95: f64,
    pub ar_50: f64,
    pub miou_o: f64,
    pub miou_d: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

impl EvalReport {
    pub fn new(det: &DetectionMetrics, seg: &SegMetrics, class_names: &[String]) -> Self {
        let mut per_class = BTreeMap::new();
        for (c, name) in class_names.iter().enumerate() {
            let mut m = det.per_class.get(&c).cloned().unwrap_or_default();
            m.iou = seg.per_class.get(&(c + 1)).copied();
            if det.per_class.contains_key(&c) || m.iou.is_some() {
                per_class.insert(name.clone(), m);
            }
        }
        Self {
            map_50_95: det.map_50_95,
            map_50: det.map_50,
            ar_50_95: det.ar_50_95,
            ar_50: det.ar_50,
            miou_o: seg.miou_o,
            miou_d: seg.miou_d,
            per_class,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned two-column table.
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("mAP@50:95".to_string(), self.map_50_95),
            ("mAP@50".to_string(), self.map_50),
            ("AR@50:95".to_string(), self.ar_50_95),
            ("AR@50".to_string(), self.ar_50),
            ("mIoU_o".to_string(), self.miou_o),
            ("mIoU_d".to_string(), self.miou_d),
        ];
        for (name, m) in &self.per_class {
            rows.push((format!("{name} AP@50"), m.ap_50));
            if let Some(v) = m.iou {
                rows.push((format!("{name} IoU"), v));
            }
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:.4}\n"))
            .collect()
    }
}
