//! Compression, wire format, and channel model for roadside messages.
//!
//! The transmitted representation is the output of a small learned codec:
//! two stride-2 convs and a 1×1 bottleneck take the `[32, 36, 36]` feature
//! map down to `[4, 9, 9]` (or `[8, 9, 9]` for the wide variant). The
//! derivative rides through the same codec. Byte accounting counts f32
//! payload bytes; the fixed-size header is tracked separately so payload
//! comparisons across systems stay clean.

pub mod channel;
pub mod wire;

use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::geom::Pose;
use crate::model::{conv_layer, deconv_layer, Binder};

/// Learned encoder (`codec.*`): features → compressed map. The final 1×1
/// stage is linear so the code can carry signed derivative values.
pub fn compress(tape: &mut Tape, binder: &mut Binder, feat: TensorId) -> Result<TensorId> {
    let c1 = conv_layer(tape, binder, feat, "codec.c1", 2, 1, true)?;
    let c2 = conv_layer(tape, binder, c1, "codec.c2", 2, 1, true)?;
    conv_layer(tape, binder, c2, "codec.c3", 1, 0, false)
}

/// Learned decoder (`dec.*`): compressed map → reconstructed features.
pub fn decompress(tape: &mut Tape, binder: &mut Binder, z: TensorId) -> Result<TensorId> {
    let d1 = deconv_layer(tape, binder, z, "dec.d1", 2, 1, true)?;
    let d2 = deconv_layer(tape, binder, d1, "dec.d2", 2, 1, true)?;
    conv_layer(tape, binder, d2, "dec.d3", 1, 0, false)
}

/// Payload bytes for a compressed map of `dims`, doubled when a derivative
/// plane travels along. Header bytes are not included.
pub fn payload_bytes(dims: [u32; 3], with_derivative: bool) -> usize {
    let plane = dims.iter().map(|&d| d as usize).product::<usize>() * 4;
    if with_derivative {
        2 * plane
    } else {
        plane
    }
}

/// Payload bytes for a raw point cloud: 16 bytes per point (x, y, z,
/// intensity as f32 each).
pub fn cloud_payload_bytes(n_points: usize) -> usize {
    16 * n_points
}

/// Payload bytes for a list of detected boxes: 32 bytes per box (score,
/// center xyz, dims wlh, yaw as f32 each).
pub fn box_payload_bytes(n_boxes: usize) -> usize {
    32 * n_boxes
}

/// Mean payload bytes per message over an episode.
pub fn average_payload_bytes(messages: &[wire::FlowMessage]) -> f64 {
    if messages.is_empty() {
        return 0.0;
    }
    messages.iter().map(|m| m.payload_bytes() as f64).sum::<f64>() / messages.len() as f64
}

/// Compresses `feature` (and optionally `derivative`) on the tape and
/// packs the result into a wire message.
pub fn build_message(
    tape: &mut Tape,
    binder: &mut Binder,
    feature: TensorId,
    derivative: Option<TensorId>,
    timestamp: f64,
    calib: &Pose,
) -> Result<wire::FlowMessage> {
    let zf = compress(tape, binder, feature)?;
    let shape = tape.shape(zf);
    let dims = [shape[0] as u32, shape[1] as u32, shape[2] as u32];
    let zd = match derivative {
        Some(d) => Some(compress(tape, binder, d)?),
        None => None,
    };
    Ok(wire::FlowMessage {
        timestamp,
        calib: wire::pose_to_calib(calib),
        dims,
        feature: tape.data(zf).to_vec(),
        derivative: zd.map(|id| tape.data(id).to_vec()),
    })
}

/// A decoded message: decompressed tensors living on the receiver's tape.
pub struct ReceivedFlow {
    pub timestamp: f64,
    pub calib: Pose,
    pub feature: TensorId,
    pub derivative: Option<TensorId>,
}

/// Decompresses a message's planes onto the receiver's tape.
pub fn open_message(tape: &mut Tape, binder: &mut Binder, msg: &wire::FlowMessage) -> Result<ReceivedFlow> {
    let dims = vec![msg.dims[0] as usize, msg.dims[1] as usize, msg.dims[2] as usize];
    let zf = tape.constant(msg.feature.clone(), dims.clone())?;
    let feature = decompress(tape, binder, zf)?;
    let derivative = match &msg.derivative {
        Some(d) => {
            let zd = tape.constant(d.clone(), dims)?;
            Some(decompress(tape, binder, zd)?)
        }
        None => None,
    };
    Ok(ReceivedFlow { timestamp: msg.timestamp, calib: wire::calib_to_pose(&msg.calib), feature, derivative })
}
