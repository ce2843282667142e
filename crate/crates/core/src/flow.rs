//! BEV feature extraction and temporal feature flow.
//!
//! The roadside unit cannot know how stale its message will be when it
//! arrives, so instead of sending a feature map for one instant it sends a
//! *flow*: the feature map plus its time derivative. The receiver
//! extrapolates linearly to its own clock,
//!
//!   F(t_v) ≈ F(t_i) + (t_v − t_i) · F′,
//!
//! then rescales the result so its L1 mass matches the transmitted map
//! (linear drift inflates or deflates activations; detection heads care
//! about relative magnitudes). The whole alignment is elementwise: no
//! convolution runs at the receiver for it, which is the entire latency
//! story. A zero time gap short-circuits to the transmitted features,
//! bitwise.

use crate::autodiff::{PillarBatch, Tape, TensorId};
use crate::error::{Error, Result};
use crate::model::{conv_layer, Binder};

/// Turns binned pillars into the learned pseudo-image (`embed.*`).
pub fn pseudo_image(tape: &mut Tape, binder: &mut Binder, batch: PillarBatch) -> Result<TensorId> {
    let w = binder.get(tape, "embed.w")?;
    let b = binder.get(tape, "embed.b")?;
    tape.pillar_embed(w, b, batch)
}

/// Shared BEV backbone (`ext.*`): pseudo-image → `[32, 36, 36]` features.
/// One stride-2 stage, three refinement convs, and a 1×1 lateral skip
/// merged additively before the final relu, so features stay nonnegative.
pub fn extract_features(tape: &mut Tape, binder: &mut Binder, pseudo: TensorId) -> Result<TensorId> {
    let c1 = conv_layer(tape, binder, pseudo, "ext.c1", 2, 1, true)?;
    let c2 = conv_layer(tape, binder, c1, "ext.c2", 1, 1, true)?;
    let c3 = conv_layer(tape, binder, c2, "ext.c3", 1, 1, true)?;
    let c4 = conv_layer(tape, binder, c3, "ext.c4", 1, 1, false)?;
    let lat = conv_layer(tape, binder, c1, "ext.lat", 1, 0, false)?;
    let merged = tape.add(c4, lat)?;
    tape.relu(merged)
}

/// One pass of the roadside generator stack over an ordered frame pair.
fn igen_stack(
    tape: &mut Tape,
    binder: &mut Binder,
    first: TensorId,
    second: TensorId,
) -> Result<TensorId> {
    let stacked = tape.concat_channels(first, second)?;
    let c1 = conv_layer(tape, binder, stacked, "igen.c1", 2, 1, true)?;
    let c2 = conv_layer(tape, binder, c1, "igen.c2", 1, 1, true)?;
    let c3 = conv_layer(tape, binder, c2, "igen.c3", 1, 1, true)?;
    let c4 = conv_layer(tape, binder, c3, "igen.c4", 1, 1, false)?;
    let lat = conv_layer(tape, binder, c1, "igen.lat", 1, 0, false)?;
    tape.add(c4, lat)
}

/// Roadside derivative generator (`igen.*`): two consecutive pseudo-images
/// stacked on channels → per-second feature derivative, signed output.
///
/// The stack runs on both frame orders and the results are subtracted, so
/// the estimate is odd under time reversal like the quantity it estimates:
/// swapping the frames flips its sign, and identical frames give exactly
/// zero for any weights.
pub fn infra_derivative(
    tape: &mut Tape,
    binder: &mut Binder,
    prev_pseudo: TensorId,
    cur_pseudo: TensorId,
) -> Result<TensorId> {
    let fwd = igen_stack(tape, binder, prev_pseudo, cur_pseudo)?;
    let rev = igen_stack(tape, binder, cur_pseudo, prev_pseudo)?;
    let neg = tape.scale(rev, -1.0)?;
    tape.add(fwd, neg)
}

/// One pass of the receiver-side generator stack over an ordered pair.
fn vgen_stack(
    tape: &mut Tape,
    binder: &mut Binder,
    first: TensorId,
    second: TensorId,
) -> Result<TensorId> {
    let stacked = tape.concat_channels(first, second)?;
    let c1 = conv_layer(tape, binder, stacked, "vgen.c1", 1, 0, true)?;
    let c2 = conv_layer(tape, binder, c1, "vgen.c2", 1, 1, true)?;
    let c3 = conv_layer(tape, binder, c2, "vgen.c3", 1, 1, true)?;
    conv_layer(tape, binder, c3, "vgen.c4", 1, 1, false)
}

/// Receiver-side generator (`vgen.*`) for the comparison system that
/// estimates the derivative from two received feature maps instead of
/// asking the sender for it. Runs convolutions at the receiver and is
/// antisymmetrised over the frame order exactly like the roadside one.
pub fn vehicle_derivative(
    tape: &mut Tape,
    binder: &mut Binder,
    prev_feat: TensorId,
    cur_feat: TensorId,
) -> Result<TensorId> {
    let fwd = vgen_stack(tape, binder, prev_feat, cur_feat)?;
    let rev = vgen_stack(tape, binder, cur_feat, prev_feat)?;
    let neg = tape.scale(rev, -1.0)?;
    tape.add(fwd, neg)
}

/// A transmitted feature map with its capture time and per-second
/// derivative, both flattened `[32, 36, 36]` buffers in the sender's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFlow {
    pub timestamp: f64,
    pub feature: Vec<f32>,
    pub derivative: Vec<f32>,
}

impl FeatureFlow {
    /// Extrapolates the features to `t_target`.
    ///
    /// `t_target == timestamp` returns the transmitted features bitwise
    /// untouched. Asking for the past is an error: the sender's derivative
    /// describes forward drift only.
    pub fn predict(&self, t_target: f64) -> Result<Vec<f32>> {
        if self.feature.len() != self.derivative.len() {
            return Err(Error::dim("flow feature/derivative sizes differ".to_string()));
        }
        if t_target < self.timestamp {
            return Err(Error::TemporalOrder { target: t_target, flow: self.timestamp });
        }
        if t_target == self.timestamp {
            return Ok(self.feature.clone());
        }
        let dt = (t_target - self.timestamp) as f32;
        let pred: Vec<f32> = self
            .feature
            .iter()
            .zip(&self.derivative)
            .map(|(&f, &d)| f + dt * d)
            .collect();
        scale_correct(&pred, &self.feature)
    }
}

/// Rescales `pred` so its L1 norm matches `reference`'s. Mirrors the
/// differentiable op; errors on a zero-norm `pred`.
pub fn scale_correct(pred: &[f32], reference: &[f32]) -> Result<Vec<f32>> {
    let lp: f64 = pred.iter().map(|&v| (v as f64).abs()).sum();
    let lr: f64 = reference.iter().map(|&v| (v as f64).abs()).sum();
    if lp == 0.0 {
        return Err(Error::degenerate("cannot scale-correct a zero-norm prediction"));
    }
    let factor = (lr / lp) as f32;
    Ok(pred.iter().map(|&v| v * factor).collect())
}

/// On-tape twin of [`FeatureFlow::predict`] for training through the
/// alignment. Purely elementwise: records no convolution.
pub fn predict_on_tape(
    tape: &mut Tape,
    feature: TensorId,
    derivative: TensorId,
    dt: f64,
) -> Result<TensorId> {
    if dt < 0.0 {
        return Err(Error::TemporalOrder { target: dt, flow: 0.0 });
    }
    if dt == 0.0 {
        return Ok(feature);
    }
    let scaled = tape.scale(derivative, dt as f32)?;
    let pred = tape.add(feature, scaled)?;
    tape.rescale_l1(pred, feature)
}
