//! Detection evaluation: greedy matching against truth boxes inside an
//! evaluation region, pooled into an 11-point interpolated average
//! precision.

use crate::fusion::head::Detection;
use crate::geom::{box_hull, rect_iou};
use crate::sim::GtBox;

/// Hull IoU at or above which a detection counts as a hit.
pub const MATCH_IOU: f64 = 0.5;

/// Axis-aligned BEV evaluation region; boxes are kept by center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Region {
    /// The full desk-scale map.
    pub fn desk() -> Region {
        Region { x: [0.0, 36.0], y: [-18.0, 18.0] }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x[0]..self.x[1]).contains(&x) && (self.y[0]..self.y[1]).contains(&y)
    }
}

/// Scored match outcomes for one frame, ready for pooling.
#[derive(Debug, Clone, Default)]
pub struct FrameMatches {
    /// Detection scores in descending order.
    pub scores: Vec<f32>,
    /// Whether the same-index detection matched a truth box.
    pub hits: Vec<bool>,
    /// Truth boxes inside the region.
    pub num_gt: usize,
}

/// Matches detections to truth boxes greedily by descending score. Each
/// truth box can be claimed once; a detection claims the highest-IoU
/// unclaimed box at or above `iou_thresh`, otherwise it is a false
/// positive. Boxes centered outside `region` are excluded on both sides.
pub fn match_frame(
    dets: &[Detection],
    gts: &[GtBox],
    region: &Region,
    iou_thresh: f64,
) -> FrameMatches {
    let gts: Vec<&GtBox> = gts
        .iter()
        .filter(|g| region.contains(g.center[0], g.center[1]))
        .collect();
    let gt_hulls: Vec<_> = gts
        .iter()
        .map(|g| box_hull(g.center[0], g.center[1], g.dims[0], g.dims[1], g.yaw))
        .collect();
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| region.contains(dets[i].center[0], dets[i].center[1]))
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("detection scores are finite")
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut out = FrameMatches { num_gt: gts.len(), ..Default::default() };
    for &i in &order {
        let d = &dets[i];
        let hull = box_hull(d.center[0], d.center[1], d.dims[0], d.dims[1], d.yaw);
        let mut best = None;
        for (gi, gh) in gt_hulls.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let iou = rect_iou(&hull, gh);
            if iou >= iou_thresh && best.map_or(true, |(_, bi)| iou > bi) {
                best = Some((gi, iou));
            }
        }
        out.scores.push(d.score);
        out.hits.push(match best {
            Some((gi, _)) => {
                claimed[gi] = true;
                true
            }
            None => false,
        });
    }
    out
}

/// Pools frames into one precision/recall curve: one (recall, precision)
/// point after each pooled detection, in descending score order. Ties
/// keep frame order, then in-frame order. Returns the point list and the
/// pooled truth count.
pub fn pr_curve(frames: &[FrameMatches]) -> (Vec<(f64, f64)>, usize) {
    let num_gt: usize = frames.iter().map(|f| f.num_gt).sum();
    let mut pooled: Vec<(f32, bool)> = frames
        .iter()
        .flat_map(|f| f.scores.iter().copied().zip(f.hits.iter().copied()))
        .collect();
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores are finite"));
    let mut curve = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (k, (_, hit)) in pooled.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        if num_gt > 0 {
            curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
        }
    }
    (curve, num_gt)
}

/// 11-point interpolated AP of a (recall, precision) point set: the mean
/// over recall anchors {0.0, 0.1, …, 1.0} of the best precision at or
/// beyond each anchor. Computed with a sorted suffix maximum.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = curve.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("recall values are finite"));
    // suffix_max[j] = best precision among points j.. (recall ≥ pts[j].0).
    let mut suffix_max = vec![0.0f64; pts.len()];
    let mut run = 0.0f64;
    for j in (0..pts.len()).rev() {
        run = run.max(pts[j].1);
        suffix_max[j] = run;
    }
    let mut total = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0 - 1e-12;
        let j = pts.partition_point(|p| p.0 < r);
        if j < pts.len() {
            total += suffix_max[j];
        }
    }
    total / 11.0
}

/// Average precision over a set of frames (single class).
pub fn average_precision(frames: &[FrameMatches]) -> f64 {
    let (curve, num_gt) = pr_curve(frames);
    if num_gt == 0 {
        return 0.0;
    }
    interpolated_ap(&curve)
}
