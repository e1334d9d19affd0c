//! Dynamic-k label assignment for the anchor-free detection head.

use crate::heads::Anchor;

pub const CENTER_RADIUS: f64 = 2.5;
pub const IOU_WEIGHT: f64 = 3.0;
pub const TOP_K_IOU: usize = 10;
pub const OUTSIDE_PENALTY: f64 = 1e5;
const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    /// `[x1, y1, x2, y2]` pixels.
    pub bbox: [f64; 4],
}

impl GtBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// GT index per anchor.
    pub anchor_gt: Vec<Option<usize>>,
    /// Anchors won by each GT, ascending.
    pub gt_anchors: Vec<Vec<usize>>,
    /// Anchors claimed by each GT before conflicts are resolved (length `k_g`).
    pub claims: Vec<Vec<usize>>,
    pub dynamic_k: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.anchor_gt
            .iter()
            .enumerate()
            .filter_map(|(a, g)| g.map(|g| (a, g)))
            .collect()
    }

    pub fn num_positives(&self) -> usize {
        self.anchor_gt.iter().filter(|g| g.is_some()).count()
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Cell center inside the box, or within `2.5·stride` (L∞) of the box center.
pub fn is_candidate(anchor: &Anchor, gt: &GtBox) -> bool {
    let (x, y) = anchor.center();
    let b = &gt.bbox;
    let inside = x > b[0] && x < b[2] && y > b[1] && y < b[3];
    let (cx, cy) = gt.center();
    let r = CENTER_RADIUS * anchor.stride as f64;
    inside || ((x - cx).abs() < r && (y - cy).abs() < r)
}

/// Class cost: BCE of `sqrt(σcls·σobj)` against the one-hot target, summed over classes.
pub fn class_cost(scores: &[f64], class_id: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let p = s.sqrt().clamp(PROB_EPS, 1.0 - PROB_EPS);
            if k == class_id {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// `cost[g][a]` and `iou[g][a]`.
pub fn cost_matrix(
    anchors: &[Anchor],
    boxes: &[[f64; 4]],
    scores: &[Vec<f64>],
    gts: &[GtBox],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut costs = Vec::with_capacity(gts.len());
    let mut ious = Vec::with_capacity(gts.len());
    for gt in gts {
        let mut c = Vec::with_capacity(anchors.len());
        let mut u = Vec::with_capacity(anchors.len());
        for (a, an) in anchors.iter().enumerate() {
            let v = iou(&boxes[a], &gt.bbox);
            let penalty = if is_candidate(an, gt) { 0.0 } else { OUTSIDE_PENALTY };
            c.push(class_cost(&scores[a], gt.class_id) + IOU_WEIGHT * -(v + 1e-8).ln() + penalty);
            u.push(v);
        }
        costs.push(c);
        ious.push(u);
    }
    (costs, ious)
}

/// `clamp(round(Σ top-10 IoU over candidates), 1, #candidates)`; zero without candidates.
pub fn dynamic_k(ious: &[f64], candidates: &[usize]) -> usize {
    if candidates.is_empty() {
        return 0;
    }
    let mut v: Vec<f64> = candidates.iter().map(|&a| ious[a]).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = v.iter().take(TOP_K_IOU).sum();
    (s.round() as usize).clamp(1, candidates.len())
}

pub fn simota_assign(anchors: &[Anchor], boxes: &[[f64; 4]], scores: &[Vec<f64>], gts: &[GtBox]) -> Assignment {
    let n = anchors.len();
    let (costs, ious) = cost_matrix(anchors, boxes, scores, gts);
    let candidates: Vec<Vec<usize>> = gts
        .iter()
        .map(|gt| (0..n).filter(|&a| is_candidate(&anchors[a], gt)).collect())
        .collect();
    let dynamic: Vec<usize> = (0..gts.len()).map(|g| dynamic_k(&ious[g], &candidates[g])).collect();

    let claims: Vec<Vec<usize>> = (0..gts.len())
        .map(|g| {
            let mut order: Vec<usize> = candidates[g].clone();
            order.sort_by(|&a, &b| costs[g][a].total_cmp(&costs[g][b]).then(a.cmp(&b)));
            order.truncate(dynamic[g]);
            order.sort_unstable();
            order
        })
        .collect();

    let mut anchor_gt: Vec<Option<usize>> = vec![None; n];
    for (g, cl) in claims.iter().enumerate() {
        for &a in cl {
            anchor_gt[a] = match anchor_gt[a] {
                Some(prev) if costs[prev][a] <= costs[g][a] => Some(prev),
                _ => Some(g),
            };
        }
    }
    let mut gt_anchors = vec![Vec::new(); gts.len()];
    for (a, g) in anchor_gt.iter().enumerate() {
        if let Some(g) = g {
            gt_anchors[*g].push(a);
        }
    }
    Assignment {
        anchor_gt,
        gt_anchors,
        claims,
        dynamic_k: dynamic,
        candidates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(stride: usize, side: usize) -> Vec<Anchor> {
        (0..side * side)
            .map(|i| Anchor { level: 0, x: i % side, y: i / side, stride })
            .collect()
    }

    #[test]
    fn no_gts() {
        let an = grid(8, 4);
        let boxes = vec![[0.0, 0.0, 8.0, 8.0]; 16];
        let scores = vec![vec![0.5; 2]; 16];
        let a = simota_assign(&an, &boxes, &scores, &[]);
        assert_eq!(a.num_positives(), 0);
        assert!(a.gt_anchors.is_empty());
    }

    #[test]
    fn single_candidate_wins() {
        let an = vec![
            Anchor { level: 0, x: 0, y: 0, stride: 8 },
            Anchor { level: 0, x: 7, y: 7, stride: 8 },
        ];
        let boxes = vec![[0.0, 0.0, 8.0, 8.0], [56.0, 56.0, 64.0, 64.0]];
        let scores = vec![vec![0.5], vec![0.5]];
        let gt = GtBox { class_id: 0, bbox: [0.0, 0.0, 6.0, 6.0] };
        let a = simota_assign(&an, &boxes, &scores, &[gt]);
        assert_eq!(a.candidates[0], vec![0]);
        assert_eq!(a.anchor_gt, vec![Some(0), None]);
    }

    #[test]
    fn iou_basic() {
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert!((iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
    }
}
