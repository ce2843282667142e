//! Spatial alignment and fusion of received features.
//!
//! Received feature maps live in the sender's BEV frame; the receiver
//! resamples them into its own frame with a precomputed bilinear plan
//! (four taps per target cell) and fuses by channel concatenation plus one
//! 3×3 convolution. Cells that fall outside the sender's coverage receive
//! zero, which the fusion conv learns to treat as "no information".

pub mod head;
pub mod loss;

use crate::autodiff::{Tape, TensorId, WarpPlan, WarpTap};
use crate::error::Result;
use crate::geom::Planar;
use crate::model::{conv_layer, Binder};

/// Geometry of a feature map: square `hw × hw` grid, rows indexing y,
/// columns indexing x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatGeom {
    pub hw: usize,
    pub cell: f64,
    pub x_min: f64,
    pub y_min: f64,
}

impl FeatGeom {
    /// Desk scale: 36×36 one-meter cells, x ∈ [0,36), y ∈ [−18,18).
    pub fn desk() -> FeatGeom {
        FeatGeom { hw: 36, cell: 1.0, x_min: 0.0, y_min: -18.0 }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell,
            self.y_min + (row as f64 + 0.5) * self.cell,
        )
    }

    /// Cell containing a point, or None outside the map.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let side = self.hw as f64 * self.cell;
        if !(self.x_min..self.x_min + side).contains(&x)
            || !(self.y_min..self.y_min + side).contains(&y)
        {
            return None;
        }
        let col = (((x - self.x_min) / self.cell) as usize).min(self.hw - 1);
        let row = (((y - self.y_min) / self.cell) as usize).min(self.hw - 1);
        Some((row, col))
    }
}

/// Builds the bilinear plan resampling a sender map into the receiver
/// grid. `sender_from_receiver` maps receiver BEV coordinates into sender
/// BEV coordinates (both maps share `geom`).
pub fn build_warp_plan(geom: &FeatGeom, sender_from_receiver: &Planar) -> WarpPlan {
    let hw = geom.hw;
    let mut taps = Vec::with_capacity(hw * hw);
    for row in 0..hw {
        for col in 0..hw {
            let (x, y) = geom.cell_center(row, col);
            let (sx, sy) = sender_from_receiver.apply(x, y);
            // Continuous cell coordinates in the sender map.
            let u = (sx - geom.x_min) / geom.cell - 0.5;
            let v = (sy - geom.y_min) / geom.cell - 0.5;
            let c0 = u.floor();
            let r0 = v.floor();
            let fu = u - c0;
            let fv = v - r0;
            let mut tap = WarpTap::default();
            let corners = [
                (r0, c0, (1.0 - fu) * (1.0 - fv)),
                (r0, c0 + 1.0, fu * (1.0 - fv)),
                (r0 + 1.0, c0, (1.0 - fu) * fv),
                (r0 + 1.0, c0 + 1.0, fu * fv),
            ];
            for (k, (r, c, w)) in corners.into_iter().enumerate() {
                if r >= 0.0 && c >= 0.0 && (r as usize) < hw && (c as usize) < hw {
                    tap.idx[k] = (r as usize * hw + c as usize) as u32;
                    tap.wgt[k] = w as f32;
                }
            }
            taps.push(tap);
        }
    }
    WarpPlan { h_in: hw, w_in: hw, h_out: hw, w_out: hw, taps }
}

/// Resamples `sender_feat` into the receiver frame using `plan`.
pub fn warp_to_receiver(tape: &mut Tape, sender_feat: TensorId, plan: WarpPlan) -> Result<TensorId> {
    tape.warp_bev(sender_feat, plan)
}

/// Fuses own and received features (`fuse.*`): concat → 3×3 conv → relu.
pub fn fuse(tape: &mut Tape, binder: &mut Binder, own: TensorId, received: TensorId) -> Result<TensorId> {
    let stacked = tape.concat_channels(own, received)?;
    conv_layer(tape, binder, stacked, "fuse.c1", 1, 1, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;

    fn warp_values(plan: &WarpPlan, src: &[f32]) -> Vec<f32> {
        let mut tape = Tape::new();
        let x = tape
            .constant(src.to_vec(), vec![1, plan.h_in, plan.w_in])
            .unwrap();
        let y = tape.warp_bev(x, plan.clone()).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn identity_transform_reproduces_the_map() {
        let geom = FeatGeom::desk();
        let plan = build_warp_plan(&geom, &Pose::identity().planar());
        let src: Vec<f32> = (0..36 * 36).map(|i| i as f32 * 0.01).collect();
        let out = warp_values(&plan, &src);
        for (a, b) in out.iter().zip(&src) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn one_cell_translation_shifts_a_spike() {
        let geom = FeatGeom::desk();
        // Receiver (10.5, 0.5) should read sender (11.5, 0.5): the sender
        // map as seen from a receiver sitting 1 m behind it.
        let shift = Pose::from_yaw_xyz(0.0, 1.0, 0.0, 0.0).planar();
        let plan = build_warp_plan(&geom, &shift);
        let mut src = vec![0.0f32; 36 * 36];
        let (row, col) = geom.cell_of(11.5, 0.5).unwrap();
        src[row * 36 + col] = 2.0;
        let out = warp_values(&plan, &src);
        let (trow, tcol) = geom.cell_of(10.5, 0.5).unwrap();
        assert!((out[trow * 36 + tcol] - 2.0).abs() < 1e-5);
        assert_eq!(out.iter().filter(|v| v.abs() > 1e-6).count(), 1);
    }

    #[test]
    fn bilinear_reproduces_affine_fields_exactly() {
        // Bilinear interpolation is exact on f(x,y) = a + b·x + c·y, so a
        // warped affine field must equal the affine field composed with
        // the transform wherever all four taps are in bounds.
        let geom = FeatGeom::desk();
        let pose = Pose::from_yaw_xyz(0.35, 3.0, -2.0, 0.0);
        let planar = pose.planar();
        let plan = build_warp_plan(&geom, &planar);
        let field = |x: f64, y: f64| 0.3 + 0.05 * x - 0.02 * y;
        let src: Vec<f32> = (0..36 * 36)
            .map(|i| {
                let (x, y) = geom.cell_center(i / 36, i % 36);
                field(x, y) as f32
            })
            .collect();
        let out = warp_values(&plan, &src);
        let mut checked = 0;
        for row in 0..36 {
            for col in 0..36 {
                let tap = &plan.taps[row * 36 + col];
                let wsum: f32 = tap.wgt.iter().sum();
                if (wsum - 1.0).abs() > 1e-6 {
                    continue; // touches the border, zero-filled
                }
                let (x, y) = geom.cell_center(row, col);
                let (sx, sy) = planar.apply(x, y);
                let expect = field(sx, sy) as f32;
                assert!(
                    (out[row * 36 + col] - expect).abs() < 1e-4,
                    "cell ({row},{col}): got {}, expected {expect}",
                    out[row * 36 + col]
                );
                checked += 1;
            }
        }
        assert!(checked > 400, "too few interior cells checked: {checked}");
    }

    #[test]
    fn out_of_coverage_cells_read_zero() {
        let geom = FeatGeom::desk();
        // A 40 m shift pushes every source lookup off the map.
        let plan = build_warp_plan(&geom, &Pose::from_yaw_xyz(0.0, 80.0, 0.0, 0.0).planar());
        let src = vec![1.0f32; 36 * 36];
        let out = warp_values(&plan, &src);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_produces_feature_shaped_nonnegative_output() {
        use crate::model::{init_params, CodecWidth, ModelSpec, FEAT_C, FEAT_HW};
        let params = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 5);
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&params);
        let n = FEAT_C * FEAT_HW * FEAT_HW;
        let own = tape.constant(vec![0.5; n], vec![FEAT_C, FEAT_HW, FEAT_HW]).unwrap();
        let rec = tape.constant(vec![-0.25; n], vec![FEAT_C, FEAT_HW, FEAT_HW]).unwrap();
        let fused = fuse(&mut tape, &mut binder, own, rec).unwrap();
        assert_eq!(tape.shape(fused), &[FEAT_C, FEAT_HW, FEAT_HW]);
        assert!(tape.data(fused).iter().all(|&v| v >= 0.0));
    }
}
