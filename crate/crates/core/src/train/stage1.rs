//! Stage one: end-to-end detection training at zero latency.
//!
//! Each step renders one frame from both sensors, runs the full pipeline
//! (pillars → features → codec round trip → warp → fuse → head) with both
//! poses taken at the same instant, and backpropagates the detection
//! loss. The roadside branch is dropped at random for a fraction of the
//! steps so the head also learns to detect from the vehicle sweep alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{accumulate_grads, Adam, AdamConfig, GradMap, ParamSet, Tape};
use crate::comm::{compress, decompress};
use crate::error::Result;
use crate::flow::extract_features;
use crate::fusion::head::head_forward;
use crate::fusion::loss::detection_loss;
use crate::fusion::{build_warp_plan, fuse, FeatGeom};
use crate::model::Binder;
use crate::pipeline::{sender_from_receiver, sensor_pseudo, zero_features};
use crate::sim::{Scenario, SensorKind};
use crate::train::{EpochLog, TrainReport};

/// Everything stage one trains; the derivative generators stay untouched.
pub const STAGE1_PREFIXES: &[&str] = &["embed.", "ext.", "codec.", "dec.", "fuse.", "head."];

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub seed: u64,
    pub epochs: usize,
    /// Frames accumulated per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing the roadside branch with zeros.
    pub infra_dropout: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            seed: 0,
            epochs: 8,
            batch: 2,
            lr: 1e-3,
            weight_decay: 0.01,
            infra_dropout: 0.25,
        }
    }
}

pub fn train_stage1(
    params: &mut ParamSet,
    scenarios: &[Scenario],
    cfg: &Stage1Config,
) -> Result<TrainReport> {
    let geom = FeatGeom::desk();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_747_3147);
    let mut items: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(i, sc)| (0..sc.n_frames).map(move |f| (i, f)))
        .collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        items.shuffle(&mut rng);
        let mut pending = GradMap::new();
        let mut in_batch = 0usize;
        let (mut sum_loss, mut sum_cls, mut sum_reg) = (0.0f64, 0.0f64, 0.0f64);

        for &(si, frame) in items.iter() {
            let sc = &scenarios[si];
            let t = sc.frame_time(frame);
            let drop_infra = rng.gen_bool(cfg.infra_dropout);

            let mut tape = Tape::new();
            let mut binder = Binder::new(params, STAGE1_PREFIXES);
            let pseudo_v = sensor_pseudo(&mut tape, &mut binder, sc, SensorKind::Vehicle, frame)?;
            let feat_v = extract_features(&mut tape, &mut binder, pseudo_v)?;
            let aligned = if drop_infra {
                zero_features(&mut tape)?
            } else {
                let pseudo_i = sensor_pseudo(&mut tape, &mut binder, sc, SensorKind::Infra, frame)?;
                let feat_i = extract_features(&mut tape, &mut binder, pseudo_i)?;
                let z = compress(&mut tape, &mut binder, feat_i)?;
                let rec = decompress(&mut tape, &mut binder, z)?;
                let rel = sender_from_receiver(
                    &sc.sensor(SensorKind::Infra).pose_at(t),
                    &sc.sensor(SensorKind::Vehicle).pose_at(t),
                );
                let plan = build_warp_plan(&geom, &rel);
                tape.warp_bev(rec, plan)?
            };
            let fused = fuse(&mut tape, &mut binder, feat_v, aligned)?;
            let head = head_forward(&mut tape, &mut binder, fused)?;
            let gts = sc.gt_vehicle_frame(t);
            let lb = detection_loss(&mut tape, head, &gts, &geom)?;
            tape.backward(lb.loss)?;
            accumulate_grads(&mut pending, binder.collect_grads(&tape));
            sum_loss += tape.value(lb.loss) as f64;
            sum_cls += lb.cls_value as f64;
            sum_reg += lb.reg_value as f64;
            in_batch += 1;
            if in_batch == cfg.batch {
                opt.step(params, &pending, in_batch as f64)?;
                pending.clear();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            opt.step(params, &pending, in_batch as f64)?;
        }
        let n = items.len().max(1) as f64;
        report.epochs.push(EpochLog {
            epoch,
            loss: sum_loss / n,
            cls: sum_cls / n,
            reg: sum_reg / n,
        });
    }
    Ok(report)
}
