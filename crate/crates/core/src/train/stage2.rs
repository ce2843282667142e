//! Stage two: self-supervised derivative-generator training.
//!
//! A training item is a frame triple (f−1, f, f+k): the generator sees
//! the two recent frames, emits a per-second derivative, and the linear
//! prediction base + k·dt·derivative is scored by cosine similarity
//! against the actual frame at f+k. The sender-side generator works on
//! pseudo-images and predicts raw extractor features it can compute
//! locally; the receiver-side generator only ever sees codec output, so
//! both its inputs and its target are decompressed feature maps. All
//! parameters outside the chosen generator stay bitwise frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{accumulate_grads, Adam, AdamConfig, GradMap, ParamSet, Tape, TensorId};
use crate::comm::{compress, decompress};
use crate::error::Result;
use crate::flow::{extract_features, infra_derivative, vehicle_derivative};
use crate::model::Binder;
use crate::pipeline::sensor_pseudo;
use crate::sim::{Scenario, SensorKind};
use crate::train::{EpochLog, TrainReport};

/// Which derivative generator to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeKind {
    /// Roadside generator (`igen.*`): pseudo-images in, raw features out.
    Sender,
    /// Receiver generator (`vgen.*`): decompressed features in and out.
    Receiver,
}

impl DerivativeKind {
    pub fn prefix(self) -> &'static str {
        match self {
            DerivativeKind::Sender => "igen.",
            DerivativeKind::Receiver => "vgen.",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Prediction horizons in frames.
    pub horizons: Vec<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            seed: 0,
            epochs: 5,
            batch: 2,
            lr: 1e-3,
            weight_decay: 0.01,
            horizons: vec![1, 2],
        }
    }
}

/// One training triple: frames (frame−1, frame, frame+horizon).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub scenario: usize,
    pub frame: usize,
    pub horizon: usize,
}

/// All valid triples over the scenario set.
pub fn build_pairs(scenarios: &[Scenario], horizons: &[usize]) -> Vec<PairIndex> {
    let mut pairs = Vec::new();
    for (si, sc) in scenarios.iter().enumerate() {
        for &k in horizons {
            for f in 1..sc.n_frames.saturating_sub(k) {
                pairs.push(PairIndex { scenario: si, frame: f, horizon: k });
            }
        }
    }
    pairs
}

/// Frozen per-frame inputs for stage two.
struct FrameData {
    pseudo: Vec<f32>,
    feat: Vec<f32>,
    received: Vec<f32>,
}

/// Computes one roadside frame's pseudo-image, features, and codec round
/// trip under frozen parameters.
fn frame_data(params: &ParamSet, sc: &Scenario, frame: usize) -> Result<FrameData> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let pseudo = sensor_pseudo(&mut tape, &mut binder, sc, SensorKind::Infra, frame)?;
    let feat = extract_features(&mut tape, &mut binder, pseudo)?;
    let z = compress(&mut tape, &mut binder, feat)?;
    let rec = decompress(&mut tape, &mut binder, z)?;
    Ok(FrameData {
        pseudo: tape.data(pseudo).to_vec(),
        feat: tape.data(feat).to_vec(),
        received: tape.data(rec).to_vec(),
    })
}

const PSEUDO_SHAPE: [usize; 3] = [crate::model::EMBED_C, 72, 72];
const FEAT_SHAPE: [usize; 3] = [crate::model::FEAT_C, 36, 36];

/// Builds the pair's loss on `tape`; returns (loss, pred, target).
fn pair_graph(
    tape: &mut Tape,
    binder: &mut Binder,
    bank: &[FrameData],
    pair: &PairIndex,
    dt: f64,
    kind: DerivativeKind,
) -> Result<(TensorId, TensorId, TensorId)> {
    let (f, k) = (pair.frame, pair.horizon);
    let horizon_dt = (k as f64 * dt) as f32;
    let (d, base, target) = match kind {
        DerivativeKind::Sender => {
            let p_prev = tape.constant(bank[f - 1].pseudo.clone(), PSEUDO_SHAPE.to_vec())?;
            let p_cur = tape.constant(bank[f].pseudo.clone(), PSEUDO_SHAPE.to_vec())?;
            let d = infra_derivative(tape, binder, p_prev, p_cur)?;
            let base = tape.constant(bank[f].feat.clone(), FEAT_SHAPE.to_vec())?;
            let target = tape.constant(bank[f + k].feat.clone(), FEAT_SHAPE.to_vec())?;
            (d, base, target)
        }
        DerivativeKind::Receiver => {
            let r_prev = tape.constant(bank[f - 1].received.clone(), FEAT_SHAPE.to_vec())?;
            let r_cur = tape.constant(bank[f].received.clone(), FEAT_SHAPE.to_vec())?;
            let d = vehicle_derivative(tape, binder, r_prev, r_cur)?;
            let target = tape.constant(bank[f + k].received.clone(), FEAT_SHAPE.to_vec())?;
            (d, r_cur, target)
        }
    };
    // base + k·dt·derivative. The L1 rescale applied at inference is a
    // positive scalar on the prediction, which cosine similarity cannot
    // see, so the training graph leaves it out.
    let step = tape.scale(d, horizon_dt)?;
    let pred = tape.add(base, step)?;
    let cos = tape.cosine_similarity(pred, target)?;
    let loss = tape.affine(cos, -1.0, 1.0)?;
    Ok((loss, pred, target))
}

/// One pair's loss value with the tensors behind it, for validation.
pub struct PairForward {
    pub loss: f64,
    pub pred: Vec<f32>,
    pub target: Vec<f32>,
}

/// Runs one pair forward under frozen parameters.
pub fn pair_forward(
    params: &ParamSet,
    sc: &Scenario,
    pair: &PairIndex,
    kind: DerivativeKind,
) -> Result<PairForward> {
    let (f, k) = (pair.frame, pair.horizon);
    let mut bank: Vec<FrameData> = Vec::new();
    for frame in 0..=(f + k) {
        // Only three frames are read; the rest stay empty placeholders.
        if frame == f - 1 || frame == f || frame == f + k {
            bank.push(frame_data(params, sc, frame)?);
        } else {
            bank.push(FrameData { pseudo: Vec::new(), feat: Vec::new(), received: Vec::new() });
        }
    }
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let (loss, pred, target) = pair_graph(&mut tape, &mut binder, &bank, pair, sc.dt, kind)?;
    Ok(PairForward {
        loss: tape.value(loss) as f64,
        pred: tape.data(pred).to_vec(),
        target: tape.data(target).to_vec(),
    })
}

pub fn train_stage2(
    params: &mut ParamSet,
    scenarios: &[Scenario],
    kind: DerivativeKind,
    cfg: &Stage2Config,
) -> Result<TrainReport> {
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_747_3247);
    let prefixes = [kind.prefix()];
    let mut scenario_order: Vec<usize> = (0..scenarios.len()).collect();
    let mut report = TrainReport::default();

    // Everything feeding the pair graphs is frozen in this stage, so the
    // per-frame inputs are computed once and reused across epochs.
    let banks: Vec<Vec<FrameData>> = scenarios
        .iter()
        .map(|sc| (0..sc.n_frames).map(|f| frame_data(params, sc, f)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.epochs {
        scenario_order.shuffle(&mut rng);
        let mut pending = GradMap::new();
        let mut in_batch = 0usize;
        let mut sum_loss = 0.0f64;
        let mut n_pairs = 0usize;

        for &si in &scenario_order {
            let sc = &scenarios[si];
            let bank = &banks[si];
            let mut pairs: Vec<PairIndex> = build_pairs(std::slice::from_ref(sc), &cfg.horizons)
                .into_iter()
                .map(|p| PairIndex { scenario: si, ..p })
                .collect();
            pairs.shuffle(&mut rng);
            for pair in &pairs {
                let mut tape = Tape::new();
                let mut binder = Binder::new(params, &prefixes);
                let (loss, _, _) = pair_graph(&mut tape, &mut binder, &bank, pair, sc.dt, kind)?;
                tape.backward(loss)?;
                accumulate_grads(&mut pending, binder.collect_grads(&tape));
                sum_loss += tape.value(loss) as f64;
                n_pairs += 1;
                in_batch += 1;
                if in_batch == cfg.batch {
                    opt.step(params, &pending, in_batch as f64)?;
                    pending.clear();
                    in_batch = 0;
                }
            }
        }
        if in_batch > 0 {
            opt.step(params, &pending, in_batch as f64)?;
        }
        report.epochs.push(EpochLog {
            epoch,
            loss: sum_loss / n_pairs.max(1) as f64,
            cls: 0.0,
            reg: 0.0,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, CodecWidth, ModelSpec};
    use crate::sim::{simulate, WorldConfig};

    fn tiny_world(seed: u64, frames: usize) -> Scenario {
        simulate(&WorldConfig { seed, n_objects: 3, n_frames: frames, ..Default::default() })
    }

    #[test]
    fn pair_enumeration_matches_hand_count() {
        let sc = tiny_world(31, 10);
        assert_eq!(build_pairs(std::slice::from_ref(&sc), &[1]).len(), 8);
        assert_eq!(build_pairs(std::slice::from_ref(&sc), &[1, 2]).len(), 15);
        let first = build_pairs(std::slice::from_ref(&sc), &[1])[0];
        assert_eq!(first, PairIndex { scenario: 0, frame: 1, horizon: 1 });
    }

    #[test]
    fn loss_value_matches_the_cosine_formula() {
        let params = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 41);
        let sc = tiny_world(32, 4);
        let pair = PairIndex { scenario: 0, frame: 1, horizon: 1 };
        for kind in [DerivativeKind::Sender, DerivativeKind::Receiver] {
            let fwd = pair_forward(&params, &sc, &pair, kind).unwrap();
            let dot: f64 = fwd.pred.iter().zip(&fwd.target).map(|(&a, &b)| a as f64 * b as f64).sum();
            let na: f64 = fwd.pred.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = fwd.target.iter().map(|&b| (b as f64).powi(2)).sum::<f64>().sqrt();
            let expect = 1.0 - dot / (na * nb);
            assert!(
                (fwd.loss - expect).abs() < 1e-6,
                "FAIL: stage-2 loss {} differs from cosine formula {expect}",
                fwd.loss
            );
        }
    }

    #[test]
    fn overfitting_one_scenario_reduces_the_loss() {
        let mut params = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 42);
        let scenarios = vec![tiny_world(33, 4)];
        let cfg = Stage2Config { epochs: 6, horizons: vec![1], ..Default::default() };
        let report = train_stage2(&mut params, &scenarios, DerivativeKind::Sender, &cfg).unwrap();
        let first = report.epochs.first().unwrap().loss;
        let last = report.epochs.last().unwrap().loss;
        assert!(last < first, "FAIL: stage-2 loss did not decrease ({first} -> {last})");
    }

    #[test]
    fn only_the_chosen_generator_changes() {
        let scenarios = vec![tiny_world(34, 4)];
        let cfg = Stage2Config { epochs: 1, horizons: vec![1], ..Default::default() };
        for (kind, own) in [
            (DerivativeKind::Sender, "igen."),
            (DerivativeKind::Receiver, "vgen."),
        ] {
            let mut params = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 43);
            let before = params.clone();
            train_stage2(&mut params, &scenarios, kind, &cfg).unwrap();
            let mut own_changed = false;
            for (name, p) in params.iter() {
                let b = before.get(name).unwrap();
                if name.starts_with(own) {
                    own_changed |= p != b;
                } else {
                    assert_eq!(p, b, "FAIL: stage 2 ({own}) touched {name}");
                }
            }
            assert!(own_changed, "FAIL: stage 2 did not move {own}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let scenarios = vec![tiny_world(35, 4)];
        let cfg = Stage2Config { epochs: 1, horizons: vec![1], ..Default::default() };
        let mut a = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 44);
        let mut b = init_params(&ModelSpec { codec: CodecWidth::Narrow }, 44);
        train_stage2(&mut a, &scenarios, DerivativeKind::Receiver, &cfg).unwrap();
        train_stage2(&mut b, &scenarios, DerivativeKind::Receiver, &cfg).unwrap();
        assert_eq!(a, b, "FAIL: same seed produced different parameters");
    }
}
