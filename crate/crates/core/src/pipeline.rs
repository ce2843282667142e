//! Shared per-frame graph builders used by training, evaluation sweeps,
//! and the command line.

use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::flow::{extract_features, pseudo_image};
use crate::fusion::FeatGeom;
use crate::geom::{Planar, Pose};
use crate::model::{Binder, FEAT_C, FEAT_HW};
use crate::pillars::{build_pillars, BevGrid};
use crate::sim::{render_cloud, Scenario, SensorKind};

/// Renders a sensor's sweep for `frame` and embeds it into the learned
/// pseudo-image (`[16, 72, 72]`).
pub fn sensor_pseudo(
    tape: &mut Tape,
    binder: &mut Binder,
    sc: &Scenario,
    kind: SensorKind,
    frame: usize,
) -> Result<TensorId> {
    let cloud = render_cloud(sc, kind, frame);
    let batch = build_pillars(&BevGrid::desk(), &cloud);
    pseudo_image(tape, binder, batch)
}

/// Pseudo-image plus extracted BEV features for one sensor frame.
pub fn sensor_features(
    tape: &mut Tape,
    binder: &mut Binder,
    sc: &Scenario,
    kind: SensorKind,
    frame: usize,
) -> Result<(TensorId, TensorId)> {
    let pseudo = sensor_pseudo(tape, binder, sc, kind, frame)?;
    let feat = extract_features(tape, binder, pseudo)?;
    Ok((pseudo, feat))
}

/// Planar transform taking receiver BEV coordinates into sender BEV
/// coordinates, with each side's pose taken at its own time. The two
/// times differ exactly by the communication staleness being corrected.
pub fn sender_from_receiver(sender_pose: &Pose, receiver_pose: &Pose) -> Planar {
    sender_pose.inverse().compose(receiver_pose).planar()
}

/// An all-zero feature map standing in for an absent collaborator.
pub fn zero_features(tape: &mut Tape) -> Result<TensorId> {
    tape.constant(vec![0.0; FEAT_C * FEAT_HW * FEAT_HW], vec![FEAT_C, FEAT_HW, FEAT_HW])
}

/// The feature-map geometry matching [`BevGrid::desk`] after the
/// backbone's single stride-2 stage.
pub fn desk_feature_geom() -> FeatGeom {
    FeatGeom::desk()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sender_from_receiver_round_trips_a_point() {
        let sp = Pose::from_yaw_xyz(-1.2, 20.0, 14.0, 0.0);
        let rp = Pose::from_yaw_xyz(0.3, 2.0, -1.0, 0.0);
        let planar = sender_from_receiver(&sp, &rp);
        // Receiver origin in sender coordinates, checked against poses.
        let (sx, sy) = planar.apply(0.0, 0.0);
        let world = rp.apply([0.0, 0.0, 0.0]);
        let direct = sp.inverse().apply(world);
        assert!((sx - direct[0]).abs() < 1e-12);
        assert!((sy - direct[1]).abs() < 1e-12);
    }
}
