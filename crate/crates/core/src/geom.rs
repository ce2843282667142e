//! Rigid transforms and BEV box geometry shared by the simulator, the
//! feature warp, and the evaluator.

use serde::{Deserialize, Serialize};

/// Wraps libm so every transcendental call in the crate goes through one
/// deterministic implementation (system libm differs across platforms).
pub mod fm {
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    pub fn atan2(y: f64, x: f64) -> f64 {
        libm::atan2(y, x)
    }
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        // IEEE-exact on every platform.
        x.sqrt()
    }
}

/// Rigid transform: `p' = R p + t` with `R` a rotation matrix.
///
/// `compose` follows matrix convention: `a.compose(&b)` applies `b` first,
/// then `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major rotation matrix; must stay orthonormal with det +1.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about +z by `yaw`, then translation to `(x, y, z)`.
    pub fn from_yaw_xyz(yaw: f64, x: f64, y: f64, z: f64) -> Self {
        let (s, c) = (fm::sin(yaw), fm::cos(yaw));
        Pose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [x, y, z],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn apply_f32(&self, p: [f32; 3]) -> [f32; 3] {
        let q = self.apply([p[0] as f64, p[1] as f64, p[2] as f64]);
        [q[0] as f32, q[1] as f32, q[2] as f32]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        let translation = self.apply(other.translation);
        Pose { rotation, translation }
    }

    /// Inverse transform; exact up to rounding since `R⁻¹ = Rᵀ`.
    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = &self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose { rotation: rt, translation }
    }

    /// Yaw of the rotation's planar component.
    pub fn yaw(&self) -> f64 {
        fm::atan2(self.rotation[1][0], self.rotation[0][0])
    }

    /// Planar (yaw + x,y translation) component, the only part a BEV warp
    /// can represent.
    pub fn planar(&self) -> Planar {
        let yaw = self.yaw();
        Planar {
            cos: fm::cos(yaw),
            sin: fm::sin(yaw),
            tx: self.translation[0],
            ty: self.translation[1],
        }
    }

    /// Max absolute deviation of `R Rᵀ` from identity; 0 for a perfect
    /// rotation.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[i][k] * r[j][k];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// 2-D rigid transform `(x,y) ↦ R(yaw)·(x,y) + (tx,ty)`.
#[derive(Debug, Clone, Copy)]
pub struct Planar {
    pub cos: f64,
    pub sin: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Planar {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.cos * x - self.sin * y + self.tx,
            self.sin * x + self.cos * y + self.ty,
        )
    }
}

/// Axis-aligned BEV rectangle, min/max corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BevRect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

/// Axis-aligned hull of a yawed box. At yaw 0 the length `l` runs along +x
/// and the width `w` along +y.
pub fn box_hull(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> BevRect {
    let (s, c) = (fm::sin(yaw).abs(), fm::cos(yaw).abs());
    let hx = 0.5 * (l * c + w * s);
    let hy = 0.5 * (l * s + w * c);
    BevRect { x0: cx - hx, y0: cy - hy, x1: cx + hx, y1: cy + hy }
}

/// Intersection-over-union of two axis-aligned rectangles. Zero-area inputs
/// yield 0.
pub fn rect_iou(a: &BevRect, b: &BevRect) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
