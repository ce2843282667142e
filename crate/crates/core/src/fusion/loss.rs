//! Detection training loss: focal binary cross-entropy on objectness plus
//! smooth-L1 box regression, with one axis-aligned anchor per BEV cell.
//!
//! Cells split three ways by best anchor-to-truth hull IoU: positives at
//! or above 0.6, negatives below 0.45, the band between ignored. Every
//! truth box additionally forces its best-IoU cell positive so a box is
//! never unsupervised, and each positive regresses toward its assigned
//! box. Both terms are normalized by the positive count (min 1); the
//! regression term carries twice the classification weight.

use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::fusion::head::{ANCHOR_DIMS, ANCHOR_Z};
use crate::fusion::FeatGeom;
use crate::geom::{box_hull, fm, rect_iou};
use crate::model::HEAD_C;
use crate::sim::GtBox;

pub const IOU_POSITIVE: f64 = 0.6;
pub const IOU_NEGATIVE: f64 = 0.45;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const REG_WEIGHT: f32 = 2.0;

/// Cell classification for one truth set.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    /// (flat cell index, index of the assigned truth box).
    pub positives: Vec<(u32, usize)>,
    pub negatives: Vec<u32>,
}

/// Assigns every cell of the grid against `gts`.
pub fn assign_anchors(gts: &[GtBox], geom: &FeatGeom) -> AnchorAssignment {
    let hw = geom.hw;
    let plane = hw * hw;
    let hulls: Vec<_> = gts
        .iter()
        .map(|g| box_hull(g.center[0], g.center[1], g.dims[0], g.dims[1], g.yaw))
        .collect();
    let mut best_iou = vec![0.0f64; plane];
    let mut best_gt = vec![usize::MAX; plane];
    // Per truth box: (best IoU over cells, cell index), for forcing.
    let mut gt_best = vec![(0.0f64, usize::MAX); gts.len()];
    for cell in 0..plane {
        let (cx, cy) = geom.cell_center(cell / hw, cell % hw);
        let anchor = box_hull(cx, cy, ANCHOR_DIMS[0], ANCHOR_DIMS[1], 0.0);
        for (gi, hull) in hulls.iter().enumerate() {
            let iou = rect_iou(&anchor, hull);
            if iou > best_iou[cell] {
                best_iou[cell] = iou;
                best_gt[cell] = gi;
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, cell);
            }
        }
    }
    let mut is_pos = vec![false; plane];
    for cell in 0..plane {
        is_pos[cell] = best_iou[cell] >= IOU_POSITIVE;
    }
    for (gi, &(iou, cell)) in gt_best.iter().enumerate() {
        if cell != usize::MAX {
            is_pos[cell] = true;
            if iou > best_iou[cell] || best_gt[cell] == usize::MAX {
                best_gt[cell] = gi;
            }
        } else if let Some((row, col)) = geom.cell_of(gts[gi].center[0], gts[gi].center[1]) {
            // Degenerate truth box overlapping no anchor at all; still
            // supervise the cell under its center.
            let cell = row * hw + col;
            is_pos[cell] = true;
            best_gt[cell] = gi;
        }
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for cell in 0..plane {
        if is_pos[cell] {
            positives.push((cell as u32, best_gt[cell]));
        } else if best_iou[cell] < IOU_NEGATIVE {
            negatives.push(cell as u32);
        }
    }
    AnchorAssignment { positives, negatives }
}

/// Regression targets for one positive cell: offsets from the cell-center
/// anchor, log size ratios, yaw sin/cos. Order matches head channels 1..9.
pub fn regression_targets(gt: &GtBox, cell_cx: f64, cell_cy: f64) -> [f32; 8] {
    [
        (gt.center[0] - cell_cx) as f32,
        (gt.center[1] - cell_cy) as f32,
        (gt.center[2] - ANCHOR_Z) as f32,
        fm::ln(gt.dims[0] / ANCHOR_DIMS[0]) as f32,
        fm::ln(gt.dims[1] / ANCHOR_DIMS[1]) as f32,
        fm::ln(gt.dims[2] / ANCHOR_DIMS[2]) as f32,
        fm::sin(gt.yaw) as f32,
        fm::cos(gt.yaw) as f32,
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// Scalar tensor: cls + 2·reg, ready for backward.
    pub loss: TensorId,
    pub cls_value: f32,
    pub reg_value: f32,
    pub num_pos: usize,
}

/// Builds the detection loss for one frame on the tape.
///
/// `head` is the raw (9, hw, hw) head map; `gts` are truth boxes in the
/// same frame as the head map.
pub fn detection_loss(
    tape: &mut Tape,
    head: TensorId,
    gts: &[GtBox],
    geom: &FeatGeom,
) -> Result<LossBreakdown> {
    let hw = geom.hw;
    let plane = (hw * hw) as u32;
    debug_assert_eq!(tape.shape(head), &[HEAD_C, hw, hw]);
    let assign = assign_anchors(gts, geom);
    let num_pos = assign.positives.len();
    let norm = num_pos.max(1) as f64;

    let pos_obj: Vec<u32> = assign.positives.iter().map(|&(c, _)| c).collect();
    let cls = tape.focal_bce(head, pos_obj, assign.negatives.clone(), FOCAL_ALPHA, FOCAL_GAMMA, norm)?;

    let mut idx = Vec::with_capacity(num_pos * 8);
    let mut target = Vec::with_capacity(num_pos * 8);
    for &(cell, gi) in &assign.positives {
        let (cx, cy) = geom.cell_center(cell as usize / hw, cell as usize % hw);
        let t = regression_targets(&gts[gi], cx, cy);
        for (ch, &tv) in t.iter().enumerate() {
            idx.push((ch as u32 + 1) * plane + cell);
            target.push(tv);
        }
    }
    let weight = vec![1.0f32; idx.len()];
    let reg = tape.smooth_l1(head, idx, target, weight, norm)?;

    let reg_scaled = tape.scale(reg, REG_WEIGHT)?;
    let loss = tape.add(cls, reg_scaled)?;
    Ok(LossBreakdown {
        loss,
        cls_value: tape.value(cls),
        reg_value: tape.value(reg),
        num_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::head::tests_support::perfect_map;

    fn gt(cx: f64, cy: f64) -> GtBox {
        GtBox { center: [cx, cy, -1.78], dims: [1.6, 3.9, 1.56], yaw: 0.0 }
    }

    #[test]
    fn assignment_splits_pos_neg_ignore_as_hand_computed() {
        let geom = FeatGeom::desk();
        // Truth box exactly on the center of cell (18, 20): x = 20.5, y = 0.5.
        let g = gt(20.5, 0.5);
        let a = assign_anchors(&[g], &geom);
        let own = 18 * 36 + 20;
        assert!(a.positives.contains(&(own as u32, 0)), "FAIL: center cell not positive");
        // x-adjacent cell: anchor shifted 1 m along the box axis. Overlap
        // 2.9·1.6, union 2·6.24 − overlap, IoU ≈ 0.59: the ignore band.
        let x_adj = (own + 1) as u32;
        assert!(!a.positives.iter().any(|&(c, _)| c == x_adj));
        assert!(!a.negatives.contains(&x_adj), "FAIL: 0.59-IoU cell must be ignored");
        // y-adjacent cell: overlap 3.9·0.6, IoU ≈ 0.23, a clean negative.
        let y_adj = (own + 36) as u32;
        assert!(a.negatives.contains(&y_adj));
        // Far corner is negative.
        assert!(a.negatives.contains(&0));
    }

    #[test]
    fn every_truth_box_gets_at_least_one_positive() {
        let geom = FeatGeom::desk();
        // Center straddling four cells: worst case for IoU thresholds.
        let g = gt(21.0, 0.0);
        let a = assign_anchors(&[g], &geom);
        assert!(!a.positives.is_empty(), "FAIL: forcing did not fire");
        assert!(a.positives.iter().all(|&(_, gi)| gi == 0));
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss_and_wrong_one_does_not() {
        let geom = FeatGeom::desk();
        let gts = vec![gt(20.5, 0.5), gt(12.5, -4.5)];
        let good = perfect_map(&geom, &gts);
        let mut tape = Tape::new();
        let h = tape.constant(good, vec![HEAD_C, 36, 36]).unwrap();
        let b = detection_loss(&mut tape, h, &gts, &geom).unwrap();
        assert!(b.num_pos >= 2);
        assert!(tape.value(b.loss) < 1e-3, "FAIL: perfect map loss {}", tape.value(b.loss));

        let mut tape = Tape::new();
        let bad = vec![0.5f32; HEAD_C * 36 * 36];
        let h = tape.constant(bad, vec![HEAD_C, 36, 36]).unwrap();
        let b = detection_loss(&mut tape, h, &gts, &geom).unwrap();
        assert!(tape.value(b.loss) > 0.5, "FAIL: wrong map loss {}", tape.value(b.loss));
    }

    #[test]
    fn loss_gradients_are_finite_and_nonzero() {
        let geom = FeatGeom::desk();
        let gts = vec![gt(20.5, 0.5)];
        let mut tape = Tape::new();
        let data = vec![0.1f32; HEAD_C * 36 * 36];
        let h = tape.tensor(data, vec![HEAD_C, 36, 36], true).unwrap();
        let b = detection_loss(&mut tape, h, &gts, &geom).unwrap();
        tape.backward(b.loss).unwrap();
        let g = tape.grad(h).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn empty_truth_set_trains_pure_background() {
        let geom = FeatGeom::desk();
        let mut tape = Tape::new();
        let data = vec![0.0f32; HEAD_C * 36 * 36];
        let h = tape.tensor(data, vec![HEAD_C, 36, 36], true).unwrap();
        let b = detection_loss(&mut tape, h, &[], &geom).unwrap();
        assert_eq!(b.num_pos, 0);
        assert_eq!(b.reg_value, 0.0);
        assert!(b.cls_value > 0.0);
        tape.backward(b.loss).unwrap();
        assert!(tape.grad(h).unwrap().iter().all(|v| v.is_finite()));
    }
}
