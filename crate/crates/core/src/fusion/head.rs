//! Detection head: a 1×1 conv over fused features producing nine channels
//! per cell (objectness logit, center offsets, size log-ratios, yaw
//! sin/cos), plus decoding and non-maximum suppression.

use crate::autodiff::{stable_sigmoid, Tape, TensorId};
use crate::error::Result;
use crate::fusion::FeatGeom;
use crate::geom::{box_hull, fm, rect_iou};
use crate::model::{conv_layer, Binder, FEAT_HW, HEAD_C};

/// Anchor box regressed against in every cell: [w, l, h] in meters.
pub const ANCHOR_DIMS: [f64; 3] = [1.6, 3.9, 1.56];
/// Anchor center height.
pub const ANCHOR_Z: f64 = -1.78;

/// Head forward (`head.*`): fused (32,36,36) → raw map (9,36,36).
pub fn head_forward(tape: &mut Tape, binder: &mut Binder, fused: TensorId) -> Result<TensorId> {
    conv_layer(tape, binder, fused, "head.c1", 1, 0, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f32,
    /// Center in the receiver frame [x, y, z].
    pub center: [f64; 3],
    /// [w, l, h] in meters.
    pub dims: [f64; 3],
    pub yaw: f64,
}

/// Decodes every cell of a raw head map (no thresholding).
///
/// Channel layout per cell: 0 objectness logit, 1..=3 center offsets in
/// meters from (cell center x, cell center y, anchor z), 4..=6 log size
/// ratios against the anchor, 7 sin yaw, 8 cos yaw.
pub fn decode(head_map: &[f32], geom: &FeatGeom) -> Vec<Detection> {
    let hw = geom.hw;
    let plane = hw * hw;
    debug_assert_eq!(head_map.len(), HEAD_C * plane);
    let mut out = Vec::with_capacity(plane);
    for row in 0..hw {
        for col in 0..hw {
            let at = |ch: usize| head_map[ch * plane + row * hw + col] as f64;
            let (cx, cy) = geom.cell_center(row, col);
            out.push(Detection {
                score: stable_sigmoid(head_map[row * hw + col] as f64) as f32,
                center: [cx + at(1), cy + at(2), ANCHOR_Z + at(3)],
                dims: [
                    ANCHOR_DIMS[0] * fm::exp(at(4)),
                    ANCHOR_DIMS[1] * fm::exp(at(5)),
                    ANCHOR_DIMS[2] * fm::exp(at(6)),
                ],
                yaw: fm::atan2(at(7), at(8)),
            });
        }
    }
    out
}

/// Greedy non-maximum suppression on BEV hull IoU. Candidates below
/// `score_thresh` are dropped first; survivors come back sorted by
/// descending score. Ties break on decode order, keeping the result
/// independent of the sort algorithm.
pub fn nms(mut dets: Vec<Detection>, score_thresh: f32, iou_thresh: f64) -> Vec<Detection> {
    dets.retain(|d| d.score >= score_thresh);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("sigmoid scores are finite")
            .then(a.cmp(&b))
    });
    let hulls: Vec<_> = dets
        .iter()
        .map(|d| box_hull(d.center[0], d.center[1], d.dims[0], d.dims[1], d.yaw))
        .collect();
    let mut alive = vec![true; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if alive[j] && rect_iou(&hulls[i], &hulls[j]) > iou_thresh {
                alive[j] = false;
            }
        }
    }
    keep.into_iter().map(|i| dets[i].clone()).collect()
}

/// Decode + threshold + NMS in one call.
pub fn detect(head_map: &[f32], geom: &FeatGeom, score_thresh: f32, iou_thresh: f64) -> Vec<Detection> {
    nms(decode(head_map, geom), score_thresh, iou_thresh)
}

/// Detections from a head map laid out at the desk scale.
pub fn detect_desk(head_map: &[f32]) -> Vec<Detection> {
    debug_assert_eq!(FEAT_HW, FeatGeom::desk().hw);
    detect(head_map, &FeatGeom::desk(), 0.1, 0.2)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn empty_map(geom: &FeatGeom) -> Vec<f32> {
        // Large negative objectness everywhere, neutral regression.
        let plane = geom.hw * geom.hw;
        let mut map = vec![0.0f32; HEAD_C * plane];
        map[..plane].fill(-12.0);
        map
    }

    fn write_cell(map: &mut [f32], geom: &FeatGeom, row: usize, col: usize, vals: [f32; HEAD_C]) {
        let plane = geom.hw * geom.hw;
        for (ch, v) in vals.into_iter().enumerate() {
            map[ch * plane + row * geom.hw + col] = v;
        }
    }

    #[test]
    fn decode_matches_hand_arithmetic() {
        let geom = FeatGeom::desk();
        let mut map = empty_map(&geom);
        write_cell(&mut map, &geom, 20, 10, [1.5, 0.25, -0.1, 0.3, 0.2, -0.1, 0.05, 0.6, 0.8]);
        let dets = decode(&map, &geom);
        let d = &dets[20 * 36 + 10];
        // Cell (20, 10) center: x = 10.5, y = −18 + 20.5 = 2.5.
        assert!((d.score as f64 - 1.0 / (1.0 + (-1.5f64).exp())).abs() < 1e-6);
        assert!((d.center[0] - 10.75).abs() < 1e-6);
        assert!((d.center[1] - 2.4).abs() < 1e-5);
        assert!((d.center[2] - (-1.48)).abs() < 1e-6);
        assert!((d.dims[0] - 1.6 * (0.2f64).exp()).abs() < 1e-6);
        assert!((d.dims[1] - 3.9 * (-0.1f64).exp()).abs() < 1e-6);
        assert!((d.dims[2] - 1.56 * (0.05f64).exp()).abs() < 1e-6);
        assert!((d.yaw - (0.6f64).atan2(0.8)).abs() < 1e-6);
    }

    #[test]
    fn nms_suppresses_overlaps_and_keeps_disjoint_boxes() {
        let mk = |score: f32, cx: f64, cy: f64| Detection {
            score,
            center: [cx, cy, -1.78],
            dims: [1.6, 3.9, 1.56],
            yaw: 0.0,
        };
        let dets = vec![mk(0.9, 10.0, 0.0), mk(0.7, 10.3, 0.1), mk(0.8, 25.0, 5.0)];
        let kept = nms(dets, 0.1, 0.2);
        assert_eq!(kept.len(), 2);
        assert!((kept[0].score - 0.9).abs() < 1e-9 && (kept[1].score - 0.8).abs() < 1e-9);
    }

    #[test]
    fn nms_drops_low_scores_before_matching() {
        let d = Detection { score: 0.05, center: [5.0, 0.0, -1.78], dims: [1.6, 3.9, 1.56], yaw: 0.0 };
        assert!(nms(vec![d], 0.1, 0.2).is_empty());
    }

    #[test]
    fn detect_round_trips_an_encoded_box() {
        // Writing the regression targets of a ground-truth box into its
        // cell and decoding must recover that box.
        let geom = FeatGeom::desk();
        let gt_center = [14.2, -3.3, -1.6];
        let gt_dims = [1.8, 4.2, 1.5];
        let gt_yaw = 0.4f64;
        let (row, col) = geom.cell_of(gt_center[0], gt_center[1]).unwrap();
        let (ccx, ccy) = geom.cell_center(row, col);
        let mut map = empty_map(&geom);
        write_cell(
            &mut map,
            &geom,
            row,
            col,
            [
                6.0,
                (gt_center[0] - ccx) as f32,
                (gt_center[1] - ccy) as f32,
                (gt_center[2] - ANCHOR_Z) as f32,
                (gt_dims[0] / ANCHOR_DIMS[0]).ln() as f32,
                (gt_dims[1] / ANCHOR_DIMS[1]).ln() as f32,
                (gt_dims[2] / ANCHOR_DIMS[2]).ln() as f32,
                gt_yaw.sin() as f32,
                gt_yaw.cos() as f32,
            ],
        );
        let dets = detect(&map, &geom, 0.5, 0.2);
        assert_eq!(dets.len(), 1, "FAIL: encoded box did not survive detect()");
        let d = &dets[0];
        for k in 0..3 {
            assert!((d.center[k] - gt_center[k]).abs() < 1e-5);
            assert!((d.dims[k] - gt_dims[k]).abs() < 1e-5);
        }
        assert!((d.yaw - gt_yaw).abs() < 1e-5);
    }
}
