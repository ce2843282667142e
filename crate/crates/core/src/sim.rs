//! Synthetic road scenes scanned by two lidars.
//!
//! A scene is a straight road along world +x with boxy vehicles drifting
//! along the lanes at constant velocity, one moving ego vehicle that carries
//! a short-range sensor, and one fixed roadside unit mounted high at the
//! curb with a long-range sensor. The two sensors see different subsets of
//! the scene, which is what makes fusing the roadside view worthwhile.
//!
//! Everything is a pure function of the scenario description: clouds are
//! re-rendered on demand from `(seed, frame, sensor)` and come out bitwise
//! identical every time, so datasets on disk are a convenience, not a
//! source of truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pose;

/// Road surface height in world coordinates. Object centers sit half a
/// body height above it.
pub const GROUND_Z: f64 = -2.56;

/// Lane center offsets from the road axis.
pub const LANES: [f64; 4] = [-4.0, -1.5, 1.5, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorKind {
    Vehicle,
    Infra,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Cars placed on the road.
    pub n_objects: usize,
    /// Object speed range in m/s; set both ends to 0 for a frozen scene.
    pub speed_range: (f64, f64),
    /// Frame period in seconds.
    pub dt: f64,
    pub n_frames: usize,
    /// Ego forward speed in m/s.
    pub vehicle_speed: f64,
    pub vehicle_range: f64,
    pub infra_range: f64,
    /// Surface samples per steradian-ish unit; larger means denser clouds.
    pub point_density: f64,
    /// Road-surface returns per sensor per frame.
    pub ground_points: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            n_objects: 6,
            speed_range: (0.0, 7.0),
            dt: 0.1,
            n_frames: 12,
            vehicle_speed: 4.0,
            vehicle_range: 18.0,
            infra_range: 40.0,
            point_density: 220.0,
            ground_points: 400,
        }
    }
}

/// Constant-velocity box with its pose sampled at scenario build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: u32,
    /// Width, length, height. Length runs along the heading.
    pub dims: [f64; 3],
    pub center0: [f64; 3],
    pub yaw: f64,
    pub speed: f64,
}

impl ObjectTrack {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let (s, c) = (crate::geom::fm::sin(self.yaw), crate::geom::fm::cos(self.yaw));
        [
            self.center0[0] + self.speed * t * c,
            self.center0[1] + self.speed * t * s,
            self.center0[2],
        ]
    }

    pub fn gt_at(&self, t: f64) -> GtBox {
        GtBox { center: self.center_at(t), dims: self.dims, yaw: self.yaw }
    }
}

/// Ground-truth box in whatever frame the caller asked for.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

/// A sensor on a straight-line trajectory (velocity zero for the fixed one).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorTrack {
    pub pose0: Pose,
    pub velocity: [f64; 3],
    pub range: f64,
}

impl SensorTrack {
    pub fn pose_at(&self, t: f64) -> Pose {
        let mut p = self.pose0.clone();
        for k in 0..3 {
            p.translation[k] += self.velocity[k] * t;
        }
        p
    }
}

/// Full deterministic description of one recorded episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub dt: f64,
    pub n_frames: usize,
    pub point_density: f64,
    pub ground_points: usize,
    pub tracks: Vec<ObjectTrack>,
    pub vehicle: SensorTrack,
    pub infra: SensorTrack,
}

impl Scenario {
    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 * self.dt
    }

    pub fn sensor(&self, kind: SensorKind) -> &SensorTrack {
        match kind {
            SensorKind::Vehicle => &self.vehicle,
            SensorKind::Infra => &self.infra,
        }
    }

    /// Ground-truth boxes expressed in the vehicle frame at `t`.
    pub fn gt_vehicle_frame(&self, t: f64) -> Vec<GtBox> {
        let inv = self.vehicle.pose_at(t).inverse();
        let ego_yaw = self.vehicle.pose0.yaw();
        self.tracks
            .iter()
            .map(|tr| {
                let g = tr.gt_at(t);
                GtBox {
                    center: inv.apply(g.center),
                    dims: g.dims,
                    yaw: g.yaw - ego_yaw,
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Scenario> {
        serde_json::from_str(s).map_err(|e| Error::format(0, format!("scenario JSON: {e}")))
    }
}

/// Builds the scenario for a config. Same config, same scenario.
pub fn simulate(cfg: &WorldConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // One shared speed per lane keeps same-lane spacing roughly constant,
    // so boxes do not interpenetrate over the episode.
    let lane_speed: Vec<f64> = (0..LANES.len())
        .map(|_| rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1))
        .collect();
    // Slot grid: 4 x-positions per lane, shuffled, consumed in order.
    let mut slots: Vec<(usize, f64)> = Vec::new();
    for lane in 0..LANES.len() {
        for s in 0..4 {
            slots.push((lane, 9.0 + 8.0 * s as f64));
        }
    }
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.gen_range(0..=i));
    }
    let n = cfg.n_objects.min(slots.len());
    let tracks: Vec<ObjectTrack> = (0..n)
        .map(|i| {
            let (lane, x_slot) = slots[i];
            let w = rng.gen_range(1.6..2.0);
            let l = rng.gen_range(3.5..4.5);
            let h = rng.gen_range(1.4..1.7);
            let y = LANES[lane] + rng.gen_range(-0.3..0.3);
            let x = x_slot + rng.gen_range(-2.0..2.0);
            let base_yaw = if LANES[lane] > 0.0 { 0.0 } else { std::f64::consts::PI };
            let yaw = base_yaw + rng.gen_range(-0.15..0.15);
            let speed = (lane_speed[lane] + rng.gen_range(-0.5..0.5))
                .clamp(cfg.speed_range.0, cfg.speed_range.1);
            ObjectTrack {
                id: i as u32,
                dims: [w, l, h],
                center0: [x, y, GROUND_Z + h / 2.0],
                yaw,
                speed,
            }
        })
        .collect();
    Scenario {
        seed: cfg.seed,
        dt: cfg.dt,
        n_frames: cfg.n_frames,
        point_density: cfg.point_density,
        ground_points: cfg.ground_points,
        tracks,
        vehicle: SensorTrack {
            pose0: Pose::from_yaw_xyz(0.0, 0.0, 0.0, 0.0),
            velocity: [cfg.vehicle_speed, 0.0, 0.0],
            range: cfg.vehicle_range,
        },
        infra: SensorTrack {
            // Curbside unit rotated to face the road. Its frame sits at
            // road level so both sensors bin points in the same z band;
            // the physical mast height only pads ranges by centimeters.
            pose0: Pose::from_yaw_xyz(-std::f64::consts::FRAC_PI_2, 20.0, 14.0, 0.0),
            velocity: [0.0, 0.0, 0.0],
            range: cfg.infra_range,
        },
    }
}

/// One lidar sweep in the sensor's own frame: x, y, z, intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Applies `pose` to every point (intensity untouched).
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| {
                let q = pose.apply_f32([p[0], p[1], p[2]]);
                [q[0], q[1], q[2], p[3]]
            })
            .collect(),
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn kind_tag(kind: SensorKind) -> u64 {
    match kind {
        SensorKind::Vehicle => 0x56,
        SensorKind::Infra => 0x49,
    }
}

/// Seed for the per-scenario sampling rasters. Deliberately frame-free: a
/// still scene must return the same surface points every frame or the clouds
/// shimmer with resampling noise no scanner actually produces.
fn raster_seed(seed: u64, kind: SensorKind, which: u64) -> u64 {
    mix64(
        seed.wrapping_add(0xA076_1D64_78BD_642F)
            .wrapping_add(which.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(kind_tag(kind).wrapping_mul(0x94D0_49BB_1331_11EB)),
    )
}

/// Hard cap on returns from one object in one frame, and the fixed raster
/// size drawn once per (scenario, sensor, object).
const MAX_OBJ_PTS: usize = 256;

/// Body-frame surface samples plus intensity for one object, fixed for the
/// whole scenario. Each frame reveals a distance-dependent prefix, so nearby
/// frames share most returns the way a scanner keeps hitting the same patch.
fn track_raster(sc_seed: u64, kind: SensorKind, tr: &ObjectTrack) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(raster_seed(sc_seed, kind, 1 + tr.id as u64));
    let [w, l, h] = tr.dims;
    // Four vertical faces plus the roof, picked in proportion to area.
    // Faces: 0/1 sides (l×h), 2/3 ends (w×h), 4 roof (w×l).
    let areas = [l * h, l * h, w * h, w * h, w * l];
    let total: f64 = areas.iter().sum();
    (0..MAX_OBJ_PTS)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            // Body frame: x along length, y along width, z up.
            let (bx, by, bz) = match face {
                0 => (rng.gen_range(-0.5..0.5) * l, -w / 2.0, rng.gen_range(-0.5..0.5) * h),
                1 => (rng.gen_range(-0.5..0.5) * l, w / 2.0, rng.gen_range(-0.5..0.5) * h),
                2 => (-l / 2.0, rng.gen_range(-0.5..0.5) * w, rng.gen_range(-0.5..0.5) * h),
                3 => (l / 2.0, rng.gen_range(-0.5..0.5) * w, rng.gen_range(-0.5..0.5) * h),
                _ => (rng.gen_range(-0.5..0.5) * l, rng.gen_range(-0.5..0.5) * w, h / 2.0),
            };
            [bx, by, bz, rng.gen_range(0.2..1.0)]
        })
        .collect()
}

/// Polar scatter of road returns anchored to the sensor, fixed per scenario:
/// (radius, bearing, height offset, intensity). Riding along with the
/// platform keeps the pseudo-image background steady frame to frame.
fn ground_raster(sc_seed: u64, kind: SensorKind, range: f64, count: usize) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(raster_seed(sc_seed, kind, 0));
    (0..count)
        .map(|_| {
            let r = range * 0.9 * rng.gen_range(0.05f64..1.0).sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            [r, a, rng.gen_range(-0.02..0.02), rng.gen_range(0.05..0.3)]
        })
        .collect()
}

/// Renders the sweep `sensor` records at `frame`. Pure and deterministic.
/// Surface patterns are fixed per scenario and only rigidly follow the
/// objects, so consecutive clouds differ by scene motion alone: a frozen
/// world renders bitwise-identical clouds at every frame.
pub fn render_cloud(sc: &Scenario, kind: SensorKind, frame: usize) -> PointCloud {
    let t = sc.frame_time(frame);
    let sensor = sc.sensor(kind);
    let pose = sensor.pose_at(t);
    let inv = pose.inverse();
    let origin = pose.translation;
    let mut points: Vec<[f32; 4]> = Vec::new();

    for tr in &sc.tracks {
        let center = tr.center_at(t);
        let d2 = (0..3).map(|k| (center[k] - origin[k]).powi(2)).sum::<f64>();
        let d = d2.sqrt();
        if d > sensor.range {
            continue;
        }
        let [w, l, h] = tr.dims;
        let total = 2.0 * l * h + 2.0 * w * h + w * l;
        let n_pts = ((sc.point_density * total / d2).round() as usize).clamp(1, MAX_OBJ_PTS);
        let raster = track_raster(sc.seed, kind, tr);
        let (s, c) = (crate::geom::fm::sin(tr.yaw), crate::geom::fm::cos(tr.yaw));
        for bp in &raster[..n_pts] {
            let wx = center[0] + c * bp[0] - s * bp[1];
            let wy = center[1] + s * bp[0] + c * bp[1];
            let wz = center[2] + bp[2];
            let p = inv.apply([wx, wy, wz]);
            points.push([p[0] as f32, p[1] as f32, p[2] as f32, bp[3] as f32]);
        }
    }

    // Road surface returns scattered around the sensor footprint.
    for g in ground_raster(sc.seed, kind, sensor.range, sc.ground_points) {
        let wx = origin[0] + g[0] * crate::geom::fm::cos(g[1]);
        let wy = origin[1] + g[0] * crate::geom::fm::sin(g[1]);
        let wz = GROUND_Z + g[2];
        let p = inv.apply([wx, wy, wz]);
        points.push([p[0] as f32, p[1] as f32, p[2] as f32, g[3] as f32]);
    }
    PointCloud { points }
}

// ── Cloud byte format ────────────────────────────────────────────────────
// magic "PCLD", version u8, count u32 LE, then count × (4 × f32 LE).

pub const CLOUD_MAGIC: [u8; 4] = *b"PCLD";
pub const CLOUD_VERSION: u8 = 1;

pub fn cloud_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(9 + cloud.points.len() * 16);
    buf.extend_from_slice(&CLOUD_MAGIC);
    buf.push(CLOUD_VERSION);
    buf.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn cloud_from_bytes(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 9 {
        return Err(Error::format(0, "cloud shorter than its header".to_string()));
    }
    if bytes[..4] != CLOUD_MAGIC {
        return Err(Error::format(0, "bad cloud magic".to_string()));
    }
    if bytes[4] != CLOUD_VERSION {
        return Err(Error::format(4, format!("unsupported cloud version {}", bytes[4])));
    }
    let count = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let body = &bytes[9..];
    if body.len() != count * 16 {
        return Err(Error::format(9, format!("expected {} point bytes, found {}", count * 16, body.len())));
    }
    let points = body
        .chunks_exact(16)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
            [f(0), f(4), f(8), f(12)]
        })
        .collect();
    Ok(PointCloud { points })
}
