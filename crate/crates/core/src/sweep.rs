//! Latency sweep: runs the cooperative-perception variants over recorded
//! scenarios at a grid of channel latencies and reports BEV mAP plus
//! payload accounting per cell.
//!
//! The roadside unit emits one message per frame at its capture time; the
//! vehicle, evaluating at `t_v`, sees whichever messages the channel has
//! delivered by then and uses the freshest by capture time. All variants
//! of one sweep share the scenario set and the channel draws (the RNG
//! stream is keyed on experiment seed, scenario, and latency setting
//! only), so a comparison across variants is paired.

use crate::autodiff::{Tape, TensorId};
use crate::comm::channel::{channel_stream, Channel, LatencyModel};
use crate::comm::wire::FlowMessage;
use crate::comm::{box_payload_bytes, build_message, cloud_payload_bytes, open_message};
use crate::error::{Error, Result};
use crate::eval::{average_precision, match_frame, FrameMatches, Region};
use crate::flow::{extract_features, infra_derivative, predict_on_tape, vehicle_derivative};
use crate::fusion::head::{detect, head_forward, Detection};
use crate::fusion::{build_warp_plan, fuse, warp_to_receiver, FeatGeom};
use crate::model::Binder;
use crate::autodiff::ParamSet;
use crate::pillars::{build_pillars, BevGrid};
use crate::pipeline::{sender_from_receiver, sensor_features, sensor_pseudo, zero_features};
use crate::sim::{render_cloud, PointCloud, Scenario, SensorKind};

/// Default latency grid in milliseconds.
pub const DEFAULT_LATENCIES_MS: [u32; 6] = [0, 100, 200, 300, 400, 500];

/// One cooperative-perception system under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Vehicle alone; nothing is transmitted.
    NonFusion,
    /// Raw infra points are shipped and merged before pillarization.
    EarlyFusion,
    /// Each side detects alone; infra boxes are shipped and merged.
    LateFusion,
    /// Compressed infra features fused as-is, stale under latency.
    MidNoPred,
    /// Same as [`MidNoPred`](Variant::MidNoPred) with the bottleneck
    /// widened to spend the derivative plane's byte budget on features.
    MidNoPredWide,
    /// Features plus a sender-computed derivative; the vehicle
    /// extrapolates to its own clock without running any network.
    FlowFusion,
    /// Features only; the vehicle estimates the derivative itself from
    /// the last two received maps, paying convolutions per frame.
    FlowFusionVehicle,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::NonFusion,
        Variant::EarlyFusion,
        Variant::LateFusion,
        Variant::MidNoPred,
        Variant::MidNoPredWide,
        Variant::FlowFusion,
        Variant::FlowFusionVehicle,
    ];

    /// Stable identifier used in result files and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Variant::NonFusion => "non_fusion",
            Variant::EarlyFusion => "early_fusion",
            Variant::LateFusion => "late_fusion",
            Variant::MidNoPred => "mid_no_pred",
            Variant::MidNoPredWide => "mid_no_pred_wide",
            Variant::FlowFusion => "flow_fusion",
            Variant::FlowFusionVehicle => "flow_fusion_vehicle",
        }
    }

    pub fn from_tag(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown variant tag {s:?}")))
    }

    /// Whether this variant runs on the wide-bottleneck checkpoint.
    pub fn wide(self) -> bool {
        matches!(self, Variant::MidNoPredWide | Variant::FlowFusionVehicle)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// The two trained parameter sets a sweep draws from: most variants ride
/// the narrow-bottleneck checkpoint, the byte-matched comparisons the
/// wide one.
#[derive(Clone, Copy)]
pub struct CheckpointSet<'a> {
    pub narrow: &'a ParamSet,
    pub wide: &'a ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub seed: u64,
    pub latencies_ms: Vec<u32>,
    pub variants: Vec<Variant>,
    /// Vehicle times evaluated, as a half-open `[start, end)` window in
    /// seconds. Leaves warm-up frames for messages to be in flight.
    pub eval_window: (f64, f64),
    /// Extra channel delay in seconds per payload byte.
    pub per_byte_cost: f64,
    pub score_thresh: f32,
    pub nms_iou: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            latencies_ms: DEFAULT_LATENCIES_MS.to_vec(),
            variants: Variant::ALL.to_vec(),
            eval_window: (0.6, 1.6),
            per_byte_cost: 0.0,
            score_thresh: 0.05,
            nms_iou: 0.2,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("sweep needs at least one variant".to_string()));
        }
        if self.latencies_ms.is_empty() {
            return Err(Error::config("sweep needs at least one latency".to_string()));
        }
        if !(self.eval_window.0 < self.eval_window.1) {
            return Err(Error::config("eval window must be a nonempty interval".to_string()));
        }
        if !self.per_byte_cost.is_finite() || self.per_byte_cost < 0.0 {
            return Err(Error::config("per-byte cost must be finite and nonnegative".to_string()));
        }
        if !self.score_thresh.is_finite() || !(0.0..=1.0).contains(&(self.score_thresh as f64)) {
            return Err(Error::config("score threshold must lie in [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// One (variant, latency) cell of a finished sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: Variant,
    pub latency_ms: u32,
    /// BEV mAP at IoU 0.5 over all evaluated frames.
    pub map_bev_50: f64,
    /// BEV mAP at the stricter IoU 0.7.
    pub map_bev_70: f64,
    /// Mean payload bytes per emitted message (0 when nothing is sent).
    pub avg_byte: f64,
    /// Number of evaluated vehicle frames pooled into the mAP.
    pub frames: usize,
    /// Convolution ops spent on latency compensation, summed over frames.
    /// Sender-derivative extrapolation costs none; the vehicle-side
    /// generator pays a forward pass per frame.
    pub align_conv_ops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub seed: u64,
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    pub fn cell(&self, variant: Variant, latency_ms: u32) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.latency_ms == latency_ms)
    }

    /// Full results table (header row first).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,latency_ms,map_bev_50,map_bev_70,avg_byte,frames,seed\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.1},{},{}\n",
                c.variant, c.latency_ms, c.map_bev_50, c.map_bev_70, c.avg_byte, c.frames, self.seed
            ));
        }
        out
    }

    /// Two-column `latency_ms map_bev_50` series for one variant, ready
    /// for `plot "file" with linespoints`.
    pub fn gnuplot_series(&self, variant: Variant) -> String {
        let mut out = format!("# {} : latency_ms map_bev_50\n", variant.tag());
        for c in self.cells.iter().filter(|c| c.variant == variant) {
            out.push_str(&format!("{} {:.6}\n", c.latency_ms, c.map_bev_50));
        }
        out
    }
}

/// Which cached per-frame products the chosen variants require.
#[derive(Debug, Clone, Copy, Default)]
struct Needs {
    narrow_veh: bool,
    wide_veh: bool,
    flow_msgs: bool,
    feat_msgs_narrow: bool,
    feat_msgs_wide: bool,
    clouds: bool,
    late: bool,
}

impl Needs {
    fn of(variants: &[Variant]) -> Needs {
        let mut n = Needs::default();
        for &v in variants {
            match v {
                Variant::NonFusion => n.narrow_veh = true,
                Variant::EarlyFusion => {
                    n.clouds = true;
                }
                Variant::LateFusion => {
                    n.narrow_veh = true;
                    n.late = true;
                }
                Variant::MidNoPred => {
                    n.narrow_veh = true;
                    n.feat_msgs_narrow = true;
                }
                Variant::MidNoPredWide => {
                    n.wide_veh = true;
                    n.feat_msgs_wide = true;
                }
                Variant::FlowFusion => {
                    n.narrow_veh = true;
                    n.flow_msgs = true;
                }
                Variant::FlowFusionVehicle => {
                    n.wide_veh = true;
                    n.feat_msgs_wide = true;
                }
            }
        }
        n
    }
}

/// Latency-independent per-frame products for one scenario. Everything
/// the channel merely delays is computed once here.
struct ScenarioCache {
    veh_feat_narrow: Vec<Vec<f32>>,
    veh_feat_wide: Vec<Vec<f32>>,
    veh_clouds: Vec<PointCloud>,
    infra_clouds: Vec<PointCloud>,
    flow_msgs: Vec<FlowMessage>,
    feat_msgs_narrow: Vec<FlowMessage>,
    feat_msgs_wide: Vec<FlowMessage>,
    /// Infra-side detections in the infra frame, for late fusion.
    infra_dets: Vec<Vec<Detection>>,
    /// Vehicle-only detections, for late fusion's local branch.
    veh_solo_dets: Vec<Vec<Detection>>,
}

fn detect_from(
    tape: &mut Tape,
    binder: &mut Binder,
    feat: TensorId,
    geom: &FeatGeom,
    cfg: &SweepConfig,
) -> Result<Vec<Detection>> {
    let zeros = zero_features(tape)?;
    let fused = fuse(tape, binder, feat, zeros)?;
    let head = head_forward(tape, binder, fused)?;
    Ok(detect(tape.data(head), geom, cfg.score_thresh, cfg.nms_iou))
}

impl ScenarioCache {
    fn build(ck: &CheckpointSet, sc: &Scenario, needs: Needs, cfg: &SweepConfig) -> Result<ScenarioCache> {
        let geom = FeatGeom::desk();
        let mut cache = ScenarioCache {
            veh_feat_narrow: Vec::new(),
            veh_feat_wide: Vec::new(),
            veh_clouds: Vec::new(),
            infra_clouds: Vec::new(),
            flow_msgs: Vec::new(),
            feat_msgs_narrow: Vec::new(),
            feat_msgs_wide: Vec::new(),
            infra_dets: Vec::new(),
            veh_solo_dets: Vec::new(),
        };
        for f in 0..sc.n_frames {
            let t_f = sc.frame_time(f);
            if needs.narrow_veh {
                let mut tape = Tape::new();
                let mut binder = Binder::frozen(ck.narrow);
                let (_, feat) = sensor_features(&mut tape, &mut binder, sc, SensorKind::Vehicle, f)?;
                cache.veh_feat_narrow.push(tape.data(feat).to_vec());
                if needs.late {
                    cache.veh_solo_dets.push(detect_from(&mut tape, &mut binder, feat, &geom, cfg)?);
                }
            }
            if needs.flow_msgs || needs.feat_msgs_narrow || needs.late {
                let mut tape = Tape::new();
                let mut binder = Binder::frozen(ck.narrow);
                let (p_cur, feat) = sensor_features(&mut tape, &mut binder, sc, SensorKind::Infra, f)?;
                let pose = sc.infra.pose_at(t_f);
                if needs.flow_msgs {
                    // First frame has no predecessor; a repeated sweep
                    // reads as a motionless scene to the generator.
                    let p_prev = sensor_pseudo(&mut tape, &mut binder, sc, SensorKind::Infra, f.saturating_sub(1))?;
                    let d = infra_derivative(&mut tape, &mut binder, p_prev, p_cur)?;
                    cache.flow_msgs.push(build_message(&mut tape, &mut binder, feat, Some(d), t_f, &pose)?);
                }
                if needs.feat_msgs_narrow {
                    cache.feat_msgs_narrow.push(build_message(&mut tape, &mut binder, feat, None, t_f, &pose)?);
                }
                if needs.late {
                    cache.infra_dets.push(detect_from(&mut tape, &mut binder, feat, &geom, cfg)?);
                }
            }
            if needs.wide_veh {
                let mut tape = Tape::new();
                let mut binder = Binder::frozen(ck.wide);
                let (_, feat) = sensor_features(&mut tape, &mut binder, sc, SensorKind::Vehicle, f)?;
                cache.veh_feat_wide.push(tape.data(feat).to_vec());
            }
            if needs.feat_msgs_wide {
                let mut tape = Tape::new();
                let mut binder = Binder::frozen(ck.wide);
                let (_, feat) = sensor_features(&mut tape, &mut binder, sc, SensorKind::Infra, f)?;
                let pose = sc.infra.pose_at(t_f);
                cache.feat_msgs_wide.push(build_message(&mut tape, &mut binder, feat, None, t_f, &pose)?);
            }
            if needs.clouds {
                cache.veh_clouds.push(render_cloud(sc, SensorKind::Vehicle, f));
                cache.infra_clouds.push(render_cloud(sc, SensorKind::Infra, f));
            }
        }
        Ok(cache)
    }

    /// Payload bytes of the message emitted at each frame for `variant`.
    /// Empty when the variant transmits nothing.
    fn payload_sizes(&self, variant: Variant) -> Vec<usize> {
        match variant {
            Variant::NonFusion => Vec::new(),
            Variant::EarlyFusion => self.infra_clouds.iter().map(|c| cloud_payload_bytes(c.len())).collect(),
            Variant::LateFusion => self.infra_dets.iter().map(|d| box_payload_bytes(d.len())).collect(),
            Variant::MidNoPred => self.feat_msgs_narrow.iter().map(|m| m.payload_bytes()).collect(),
            Variant::MidNoPredWide | Variant::FlowFusionVehicle => {
                self.feat_msgs_wide.iter().map(|m| m.payload_bytes()).collect()
            }
            Variant::FlowFusion => self.flow_msgs.iter().map(|m| m.payload_bytes()).collect(),
        }
    }
}

/// Index of the freshest-by-capture message delivered by `t_v`, plus the
/// freshest older one (the vehicle-side generator's second input).
/// Capture times increase with index, so a reverse scan suffices even
/// when the channel reorders deliveries.
fn select_arrived(arrivals: &[f64], t_v: f64) -> (Option<usize>, Option<usize>) {
    let cur = (0..arrivals.len()).rev().find(|&f| arrivals[f] <= t_v);
    let prev = match cur {
        Some(c) => (0..c).rev().find(|&f| arrivals[f] <= t_v),
        None => None,
    };
    (cur, prev)
}

fn transform_detection(d: &Detection, rel: &crate::geom::Pose) -> Detection {
    Detection { score: d.score, center: rel.apply(d.center), dims: d.dims, yaw: d.yaw + rel.yaw() }
}

/// Runs one variant on one vehicle frame. Returns the detections in the
/// vehicle frame and the convolution ops spent on latency compensation.
fn eval_frame(
    variant: Variant,
    ck: &CheckpointSet,
    sc: &Scenario,
    cache: &ScenarioCache,
    f_v: usize,
    cur: Option<usize>,
    prev: Option<usize>,
    cfg: &SweepConfig,
) -> Result<(Vec<Detection>, usize)> {
    let geom = FeatGeom::desk();
    let t_v = sc.frame_time(f_v);
    let params = if variant.wide() { ck.wide } else { ck.narrow };
    match variant {
        Variant::NonFusion => {
            let mut tape = Tape::new();
            let mut binder = Binder::frozen(params);
            let own = tape.constant(cache.veh_feat_narrow[f_v].clone(), feat_shape())?;
            Ok((detect_from(&mut tape, &mut binder, own, &geom, cfg)?, 0))
        }
        Variant::EarlyFusion => {
            let mut merged = cache.veh_clouds[f_v].clone();
            if let Some(c) = cur {
                let rel = sc.vehicle.pose_at(t_v).inverse().compose(&sc.infra.pose_at(sc.frame_time(c)));
                merged.points.extend(crate::sim::transform_cloud(&cache.infra_clouds[c], &rel).points);
            }
            let mut tape = Tape::new();
            let mut binder = Binder::frozen(params);
            let batch = build_pillars(&BevGrid::desk(), &merged);
            let pseudo = crate::flow::pseudo_image(&mut tape, &mut binder, batch)?;
            let feat = extract_features(&mut tape, &mut binder, pseudo)?;
            Ok((detect_from(&mut tape, &mut binder, feat, &geom, cfg)?, 0))
        }
        Variant::LateFusion => {
            let mut dets = cache.veh_solo_dets[f_v].clone();
            if let Some(c) = cur {
                let rel = sc.vehicle.pose_at(t_v).inverse().compose(&sc.infra.pose_at(sc.frame_time(c)));
                dets.extend(cache.infra_dets[c].iter().map(|d| transform_detection(d, &rel)));
            }
            Ok((crate::fusion::head::nms(dets, cfg.score_thresh, cfg.nms_iou), 0))
        }
        Variant::MidNoPred | Variant::MidNoPredWide | Variant::FlowFusion | Variant::FlowFusionVehicle => {
            let mut tape = Tape::new();
            let mut binder = Binder::frozen(params);
            let own_vals = if variant.wide() {
                cache.veh_feat_wide[f_v].clone()
            } else {
                cache.veh_feat_narrow[f_v].clone()
            };
            let own = tape.constant(own_vals, feat_shape())?;
            let Some(c) = cur else {
                // Nothing delivered yet; fall back to solo perception.
                return Ok((detect_from(&mut tape, &mut binder, own, &geom, cfg)?, 0));
            };
            let msgs: &[FlowMessage] = match variant {
                Variant::MidNoPred => &cache.feat_msgs_narrow,
                Variant::MidNoPredWide | Variant::FlowFusionVehicle => &cache.feat_msgs_wide,
                _ => &cache.flow_msgs,
            };
            let rec = open_message(&mut tape, &mut binder, &msgs[c])?;
            // The generator needs a second map; before one exists it sees
            // the current map twice and reads a motionless scene.
            let rec_prev = if variant == Variant::FlowFusionVehicle {
                Some(open_message(&mut tape, &mut binder, &msgs[prev.unwrap_or(c)])?)
            } else {
                None
            };
            let dt = t_v - rec.timestamp;
            let mark = tape.conv_op_count();
            let aligned = match variant {
                Variant::MidNoPred | Variant::MidNoPredWide => rec.feature,
                Variant::FlowFusion => {
                    let d = rec
                        .derivative
                        .ok_or_else(|| Error::config("flow message lacks a derivative plane".to_string()))?;
                    predict_on_tape(&mut tape, rec.feature, d, dt)?
                }
                _ => {
                    let rp = rec_prev.expect("generator variant opened two messages");
                    let d = vehicle_derivative(&mut tape, &mut binder, rp.feature, rec.feature)?;
                    predict_on_tape(&mut tape, rec.feature, d, dt)?
                }
            };
            let plan = build_warp_plan(&geom, &sender_from_receiver(&rec.calib, &sc.vehicle.pose_at(t_v)));
            let warped = warp_to_receiver(&mut tape, aligned, plan)?;
            let align_convs = tape.conv_op_count() - mark;
            let fused = fuse(&mut tape, &mut binder, own, warped)?;
            let head = head_forward(&mut tape, &mut binder, fused)?;
            Ok((detect(tape.data(head), &geom, cfg.score_thresh, cfg.nms_iou), align_convs))
        }
    }
}

fn feat_shape() -> Vec<usize> {
    use crate::model::{FEAT_C, FEAT_HW};
    vec![FEAT_C, FEAT_HW, FEAT_HW]
}

#[derive(Default)]
struct CellAcc {
    m50: Vec<FrameMatches>,
    m70: Vec<FrameMatches>,
    bytes: f64,
    msgs: usize,
    frames: usize,
    align_conv_ops: usize,
}

/// Runs the full sweep. Deterministic in (checkpoints, scenarios, config).
pub fn run_sweep(ck: &CheckpointSet, scenarios: &[Scenario], cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::config("sweep needs at least one scenario".to_string()));
    }
    let needs = Needs::of(&cfg.variants);
    let region = Region::desk();
    let mut acc: Vec<Vec<CellAcc>> = cfg
        .variants
        .iter()
        .map(|_| cfg.latencies_ms.iter().map(|_| CellAcc::default()).collect())
        .collect();
    for (si, sc) in scenarios.iter().enumerate() {
        let eval_frames: Vec<usize> = (0..sc.n_frames)
            .filter(|&f| {
                let t = sc.frame_time(f);
                cfg.eval_window.0 <= t && t < cfg.eval_window.1
            })
            .collect();
        if eval_frames.is_empty() {
            return Err(Error::config(format!(
                "eval window [{}, {}) selects no frames of scenario {si}",
                cfg.eval_window.0, cfg.eval_window.1
            )));
        }
        let cache = ScenarioCache::build(ck, sc, needs, cfg)?;
        for (vi, &variant) in cfg.variants.iter().enumerate() {
            let payloads = cache.payload_sizes(variant);
            for (li, &lat_ms) in cfg.latencies_ms.iter().enumerate() {
                let channel = Channel {
                    latency: LatencyModel::Fixed { seconds: lat_ms as f64 / 1000.0 },
                    per_byte_cost: cfg.per_byte_cost,
                };
                let mut rng = channel_stream(cfg.seed, si as u64, lat_ms as u64);
                let arrivals: Vec<f64> = payloads
                    .iter()
                    .enumerate()
                    .map(|(f, &len)| sc.frame_time(f) + channel.deliver(len, &mut rng))
                    .collect();
                let cell = &mut acc[vi][li];
                for &f_v in &eval_frames {
                    let t_v = sc.frame_time(f_v);
                    let (cur, prev) = select_arrived(&arrivals, t_v);
                    let (dets, align) = eval_frame(variant, ck, sc, &cache, f_v, cur, prev, cfg)?;
                    let gts = sc.gt_vehicle_frame(t_v);
                    cell.m50.push(match_frame(&dets, &gts, &region, 0.5));
                    cell.m70.push(match_frame(&dets, &gts, &region, 0.7));
                    cell.frames += 1;
                    cell.align_conv_ops += align;
                }
                cell.bytes += payloads.iter().map(|&b| b as f64).sum::<f64>();
                cell.msgs += payloads.len();
            }
        }
    }
    let mut cells = Vec::new();
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        for (li, &lat_ms) in cfg.latencies_ms.iter().enumerate() {
            let cell = &acc[vi][li];
            cells.push(CellResult {
                variant,
                latency_ms: lat_ms,
                map_bev_50: average_precision(&cell.m50),
                map_bev_70: average_precision(&cell.m70),
                avg_byte: if cell.msgs == 0 { 0.0 } else { cell.bytes / cell.msgs as f64 },
                frames: cell.frames,
                align_conv_ops: cell.align_conv_ops,
            });
        }
    }
    Ok(SweepResult { seed: cfg.seed, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, CodecWidth, ModelSpec};
    use crate::sim::{simulate, WorldConfig};

    fn tiny_scenarios(n: usize) -> Vec<Scenario> {
        (0..n)
            .map(|i| {
                simulate(&WorldConfig {
                    seed: 40 + i as u64,
                    n_objects: 3,
                    n_frames: 6,
                    point_density: 80.0,
                    ground_points: 150,
                    ..WorldConfig::default()
                })
            })
            .collect()
    }

    fn tiny_ck() -> (ParamSet, ParamSet) {
        let narrow = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 7);
        let wide = init_params(&ModelSpec { codec: CodecWidth::Wide }, 8);
        (narrow, wide)
    }

    fn tiny_cfg() -> SweepConfig {
        SweepConfig {
            latencies_ms: vec![0, 200],
            eval_window: (0.2, 0.6),
            ..SweepConfig::default()
        }
    }

    #[test]
    fn payload_accounting_matches_the_wire_sizes() {
        let (narrow, wide) = tiny_ck();
        let ck = CheckpointSet { narrow: &narrow, wide: &wide };
        let scenarios = tiny_scenarios(1);
        let res = run_sweep(&ck, &scenarios, &tiny_cfg()).unwrap();
        let b = |v| res.cell(v, 0).unwrap().avg_byte;
        assert_eq!(b(Variant::NonFusion), 0.0, "silent variant must bill zero bytes");
        assert_eq!(b(Variant::FlowFusion), 2.0 * 4.0 * 9.0 * 9.0 * 4.0, "feature+derivative planes");
        assert_eq!(b(Variant::MidNoPred), 4.0 * 9.0 * 9.0 * 4.0, "single narrow plane");
        assert_eq!(b(Variant::MidNoPredWide), 8.0 * 9.0 * 9.0 * 4.0, "single wide plane");
        assert_eq!(b(Variant::FlowFusionVehicle), b(Variant::MidNoPredWide));
        // Clouds and boxes bill 16 and 32 bytes a piece.
        let cache = ScenarioCache::build(&ck, &scenarios[0], Needs::of(&Variant::ALL), &tiny_cfg()).unwrap();
        let n_pts: usize = cache.infra_clouds.iter().map(|c| c.len()).sum();
        let n_frames = scenarios[0].n_frames;
        assert!((b(Variant::EarlyFusion) - 16.0 * n_pts as f64 / n_frames as f64).abs() < 1e-9);
        let n_boxes: usize = cache.infra_dets.iter().map(|d| d.len()).sum();
        assert!((b(Variant::LateFusion) - 32.0 * n_boxes as f64 / n_frames as f64).abs() < 1e-9);
    }

    #[test]
    fn zero_latency_prediction_is_bitwise_inert() {
        let (narrow, wide) = tiny_ck();
        let ck = CheckpointSet { narrow: &narrow, wide: &wide };
        let scenarios = tiny_scenarios(1);
        let cfg = SweepConfig {
            latencies_ms: vec![0],
            variants: vec![Variant::FlowFusion, Variant::MidNoPred],
            ..tiny_cfg()
        };
        let sc = &scenarios[0];
        let needs = Needs::of(&cfg.variants);
        let cache = ScenarioCache::build(&ck, sc, needs, &cfg).unwrap();
        for f_v in 2..sc.n_frames {
            let (df, af) =
                eval_frame(Variant::FlowFusion, &ck, sc, &cache, f_v, Some(f_v), Some(f_v - 1), &cfg).unwrap();
            let (dm, _) =
                eval_frame(Variant::MidNoPred, &ck, sc, &cache, f_v, Some(f_v), Some(f_v - 1), &cfg).unwrap();
            assert_eq!(af, 0, "sender-derivative alignment must cost no convolutions");
            assert_eq!(df.len(), dm.len(), "frame {f_v}: detection counts differ at zero staleness");
            for (a, b) in df.iter().zip(&dm) {
                assert_eq!(a.score.to_bits(), b.score.to_bits(), "frame {f_v}: scores differ bitwise");
                assert_eq!(a.center, b.center, "frame {f_v}: centers differ");
                assert_eq!(a.yaw, b.yaw, "frame {f_v}: yaws differ");
            }
        }
    }

    #[test]
    fn generator_variant_pays_convolutions_for_alignment() {
        let (narrow, wide) = tiny_ck();
        let ck = CheckpointSet { narrow: &narrow, wide: &wide };
        let scenarios = tiny_scenarios(1);
        let cfg = SweepConfig {
            latencies_ms: vec![200],
            variants: vec![Variant::FlowFusion, Variant::FlowFusionVehicle],
            ..tiny_cfg()
        };
        let res = run_sweep(&ck, &scenarios, &cfg).unwrap();
        let flow = res.cell(Variant::FlowFusion, 200).unwrap();
        let gen = res.cell(Variant::FlowFusionVehicle, 200).unwrap();
        assert_eq!(flow.align_conv_ops, 0, "extrapolation from the wire must stay conv-free");
        assert!(
            gen.align_conv_ops >= gen.frames,
            "vehicle-side generator must run at least one conv per frame, got {} over {}",
            gen.align_conv_ops,
            gen.frames
        );
    }

    #[test]
    fn sweep_is_deterministic() {
        let (narrow, wide) = tiny_ck();
        let ck = CheckpointSet { narrow: &narrow, wide: &wide };
        let scenarios = tiny_scenarios(2);
        let cfg = SweepConfig { variants: Variant::ALL.to_vec(), ..tiny_cfg() };
        let a = run_sweep(&ck, &scenarios, &cfg).unwrap();
        let b = run_sweep(&ck, &scenarios, &cfg).unwrap();
        assert_eq!(a, b, "same inputs must reproduce the same sweep bit for bit");
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn csv_and_gnuplot_outputs_are_well_formed() {
        let (narrow, wide) = tiny_ck();
        let ck = CheckpointSet { narrow: &narrow, wide: &wide };
        let scenarios = tiny_scenarios(1);
        let cfg = SweepConfig {
            latencies_ms: vec![0, 200],
            variants: vec![Variant::NonFusion, Variant::FlowFusion],
            ..tiny_cfg()
        };
        let res = run_sweep(&ck, &scenarios, &cfg).unwrap();
        let csv = res.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,latency_ms,map_bev_50,map_bev_70,avg_byte,frames,seed");
        assert_eq!(lines.count(), 4, "one row per variant-latency cell");
        assert!(csv.contains("non_fusion,0,"));
        assert!(csv.contains("flow_fusion,200,"));
        let series = res.gnuplot_series(Variant::FlowFusion);
        let data_lines: Vec<&str> = series.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data_lines.len(), 2);
        for l in data_lines {
            assert_eq!(l.split_whitespace().count(), 2, "gnuplot rows are two columns");
        }
    }

    #[test]
    fn message_selection_respects_arrival_times() {
        // Captures at 0.0, 0.1, 0.2 with delay 0.15: by t=0.26 the
        // freshest delivered capture is 0.1, with 0.0 behind it.
        let arrivals = vec![0.15, 0.25, 0.35];
        assert_eq!(select_arrived(&arrivals, 0.26), (Some(1), Some(0)));
        assert_eq!(select_arrived(&arrivals, 0.10), (None, None));
        assert_eq!(select_arrived(&arrivals, 0.16), (Some(0), None));
        assert_eq!(select_arrived(&arrivals, 1.0), (Some(2), Some(1)));
        // Reordered deliveries: the late early-capture never shadows a
        // delivered later capture.
        let reordered = vec![0.9, 0.2, 0.95];
        assert_eq!(select_arrived(&reordered, 0.5), (Some(1), None));
        assert_eq!(select_arrived(&reordered, 0.92), (Some(1), Some(0)));
    }

    #[test]
    fn unknown_variant_tags_are_rejected() {
        assert!(Variant::from_tag("flow_fusion").is_ok());
        for v in Variant::ALL {
            assert_eq!(Variant::from_tag(v.tag()).unwrap(), v);
        }
        assert!(Variant::from_tag("FlowFusion").is_err());
        assert!(Variant::from_tag("").is_err());
    }
}
