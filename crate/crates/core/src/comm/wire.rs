//! Wire format for feature-flow messages.
//!
//! Layout (little-endian):
//!   magic    b"CFLW"              4 B
//!   version  u8                   1 B
//!   flags    u8 (bit 0: derivative present)
//!   t_i      f64                  8 B
//!   calib    12 × f32            48 B   row-major 3×4 [R|t], sender→world
//!   dims     3 × u32             12 B   compressed (c, h, w)
//!   feature  c·h·w × f32
//!   deriv    c·h·w × f32          only when flag bit 0 is set
//!
//! The 74-byte header is excluded from payload accounting. Decoding
//! validates the declared sizes against the actual buffer before any
//! allocation, so hostile input degrades to an error, never a panic or an
//! absurd allocation.

use crate::error::{Error, Result};
use crate::geom::Pose;

pub const MAGIC: [u8; 4] = *b"CFLW";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 74;
const FLAG_DERIVATIVE: u8 = 0b0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMessage {
    /// Sender capture time in seconds.
    pub timestamp: f64,
    /// Row-major 3×4 [R|t] mapping sender coordinates to world.
    pub calib: [f32; 12],
    /// Compressed plane dims (c, h, w).
    pub dims: [u32; 3],
    pub feature: Vec<f32>,
    pub derivative: Option<Vec<f32>>,
}

impl FlowMessage {
    pub fn plane_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    /// f32 payload bytes (header excluded).
    pub fn payload_bytes(&self) -> usize {
        super::payload_bytes(self.dims, self.derivative.is_some())
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.payload_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        assert_eq!(self.feature.len(), self.plane_len(), "feature does not match dims");
        if let Some(d) = &self.derivative {
            assert_eq!(d.len(), self.plane_len(), "derivative does not match dims");
        }
        let mut buf = Vec::with_capacity(self.total_bytes());
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.push(if self.derivative.is_some() { FLAG_DERIVATIVE } else { 0 });
        buf.extend_from_slice(&self.timestamp.to_le_bytes());
        for v in &self.calib {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for d in &self.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.feature {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(deriv) = &self.derivative {
            for v in deriv {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        debug_assert_eq!(buf.len(), self.total_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FlowMessage> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::format(bytes.len(), "message shorter than its header".to_string()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad message magic".to_string()));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(4, format!("unsupported message version {}", bytes[4])));
        }
        let flags = bytes[5];
        if flags & !FLAG_DERIVATIVE != 0 {
            return Err(Error::format(5, format!("unknown flag bits {flags:#04x}")));
        }
        let has_derivative = flags & FLAG_DERIVATIVE != 0;
        let timestamp = f64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
        if !timestamp.is_finite() {
            return Err(Error::format(6, "non-finite timestamp".to_string()));
        }
        let mut calib = [0.0f32; 12];
        for (i, c) in calib.iter_mut().enumerate() {
            let o = 14 + i * 4;
            *c = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        }
        let mut dims = [0u32; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 62 + i * 4;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        }
        let plane = dims.iter().try_fold(1usize, |acc, &d| {
            if d == 0 {
                return Err(Error::format(62, "zero dimension".to_string()));
            }
            acc.checked_mul(d as usize)
                .ok_or_else(|| Error::format(62, "dims overflow".to_string()))
        })?;
        let planes = if has_derivative { 2 } else { 1 };
        let expected = plane
            .checked_mul(4 * planes)
            .ok_or_else(|| Error::format(62, "dims overflow".to_string()))?;
        let body = &bytes[HEADER_BYTES..];
        if body.len() != expected {
            return Err(Error::format(
                HEADER_BYTES,
                format!("payload is {} bytes, dims demand {expected}", body.len()),
            ));
        }
        let read_plane = |o: usize| -> Vec<f32> {
            body[o..o + plane * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let feature = read_plane(0);
        let derivative = has_derivative.then(|| read_plane(plane * 4));
        Ok(FlowMessage { timestamp, calib, dims, feature, derivative })
    }
}

/// Pose → row-major 3×4 [R|t] in f32.
pub fn pose_to_calib(pose: &Pose) -> [f32; 12] {
    let mut c = [0.0f32; 12];
    for r in 0..3 {
        for col in 0..3 {
            c[r * 4 + col] = pose.rotation[r][col] as f32;
        }
        c[r * 4 + 3] = pose.translation[r] as f32;
    }
    c
}

/// Inverse of [`pose_to_calib`] (up to f32 rounding in the pose entries).
pub fn calib_to_pose(calib: &[f32; 12]) -> Pose {
    let mut rotation = [[0.0f64; 3]; 3];
    let mut translation = [0.0f64; 3];
    for r in 0..3 {
        for col in 0..3 {
            rotation[r][col] = calib[r * 4 + col] as f64;
        }
        translation[r] = calib[r * 4 + 3] as f64;
    }
    Pose { rotation, translation }
}
