//! Fast self-check suite: re-runs the load-bearing oracles (gradients,
//! reference kernels, metric formulas, wire safety, byte accounting) on
//! fresh random draws. The command line exposes it as a build sanity
//! gate; everything here is pure compute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{checkpoint, Tape};
use crate::comm::wire::FlowMessage;
use crate::comm::{box_payload_bytes, cloud_payload_bytes, payload_bytes};
use crate::eval::{average_precision, interpolated_ap, FrameMatches};
use crate::flow::FeatureFlow;
use crate::fusion::{build_warp_plan, warp_to_receiver, FeatGeom};
use crate::geom::Pose;
use crate::gradcheck::{max_rel_error, ALL_OPS};
use crate::model::{init_params, CodecWidth, ModelSpec};
use crate::oracle;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn pass(name: &'static str, detail: String) -> Check {
        Check { name, passed: true, detail }
    }

    fn fail(name: &'static str, detail: String) -> Check {
        Check { name, passed: false, detail }
    }
}

fn check_op_gradients(seed: u64) -> Check {
    let mut worst = 0.0f64;
    let mut worst_op = String::new();
    for op in ALL_OPS {
        let err = max_rel_error(op, 3, 1e-3, seed ^ 0xC0FFEE);
        if err > worst {
            worst = err;
            worst_op = format!("{op:?}");
        }
    }
    let detail = format!("worst rel err {worst:.2e} ({worst_op})");
    if worst < 1e-4 {
        Check::pass("op-gradients", detail)
    } else {
        Check::fail("op-gradients", detail)
    }
}

fn check_conv_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let (ci, co, h, w, k) = (3usize, 4usize, 9usize, 8usize, 3usize);
    let x: Vec<f32> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt: Vec<f32> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let xt = tape.constant(x.clone(), vec![ci, h, w]).unwrap();
    let wtt = tape.constant(wt.clone(), vec![co, ci, k, k]).unwrap();
    let bt = tape.constant(b.clone(), vec![co]).unwrap();
    let y = tape.conv2d(xt, wtt, bt, 2, 1).unwrap();
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
    let (reference, _) =
        oracle::conv2d_ref(&to64(&x), ci, h, w, &to64(&wt), co, k, k, &to64(&b), 2, 1);
    let diff = tape
        .data(y)
        .iter()
        .zip(&reference)
        .map(|(&a, &r)| (a as f64 - r).abs())
        .fold(0.0f64, f64::max);
    let detail = format!("max |conv - reference| = {diff:.2e}");
    if diff < 1e-6 {
        Check::pass("conv-oracle", detail)
    } else {
        Check::fail("conv-oracle", detail)
    }
}

fn half_recall_frame() -> FrameMatches {
    // Ten ground truths, five hits at high score, nothing after: the
    // interpolated eleven-point sum is 6/11 by hand.
    FrameMatches {
        scores: (0..5).map(|i| 0.9 - 0.1 * i as f32).collect(),
        hits: vec![true; 5],
        num_gt: 10,
    }
}

fn check_ap_formula(seed: u64) -> Check {
    let half = average_precision(&[half_recall_frame()]);
    if (half - 6.0 / 11.0).abs() > 1e-12 {
        return Check::fail("ap-formula", format!("half-recall case gave {half}, want 6/11"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..12);
        let curve: Vec<(f64, f64)> =
            (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
        let got = interpolated_ap(&curve);
        let want = oracle::eleven_point_ap_ref(&curve);
        worst = worst.max((got - want).abs());
    }
    let detail = format!("half-recall exact, 50 random curves within {worst:.2e} of reference");
    if worst < 1e-12 {
        Check::pass("ap-formula", detail)
    } else {
        Check::fail("ap-formula", detail)
    }
}

fn random_message(rng: &mut ChaCha8Rng) -> FlowMessage {
    let dims = [rng.gen_range(1..5u32), rng.gen_range(1..7u32), rng.gen_range(1..7u32)];
    let n = dims.iter().product::<u32>() as usize;
    let with_d = rng.gen_bool(0.5);
    FlowMessage {
        timestamp: rng.gen_range(-10.0..10.0),
        calib: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
        dims,
        feature: (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        derivative: with_d.then(|| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()),
    }
}

fn check_wire_safety(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3141);
    for i in 0..500 {
        let msg = random_message(&mut rng);
        let bytes = msg.to_bytes();
        match FlowMessage::from_bytes(&bytes) {
            Ok(back) if back == msg => {}
            Ok(_) => return Check::fail("wire-safety", format!("round trip {i} altered the message")),
            Err(e) => return Check::fail("wire-safety", format!("round trip {i} failed: {e}")),
        }
        let mut corrupt = bytes.clone();
        let pos = rng.gen_range(0..corrupt.len());
        corrupt[pos] ^= 1 << rng.gen_range(0..8);
        // Any outcome but a panic is acceptable for corrupted bytes.
        let _ = FlowMessage::from_bytes(&corrupt);
    }
    Check::pass("wire-safety", "500 round trips bitwise, 500 mutations handled".to_string())
}

fn check_byte_accounting() -> Check {
    let cases = [
        ("100k points", cloud_payload_bytes(100_000), 1_600_000usize),
        ("10 boxes", box_payload_bytes(10), 320),
        ("100^3 tensor", payload_bytes([100, 100, 100], false), 4_000_000),
        ("full-scale flow", payload_bytes([12, 36, 36], true), 124_416),
        ("full-scale feature-only", payload_bytes([12, 36, 36], false), 62_208),
    ];
    for (what, got, want) in cases {
        if got != want {
            return Check::fail("byte-accounting", format!("{what}: got {got}, want {want}"));
        }
    }
    Check::pass("byte-accounting", "all worked payload sizes match".to_string())
}

fn check_checkpoint_roundtrip(seed: u64) -> Check {
    let params = init_params(&ModelSpec { codec: CodecWidth::Narrow }, seed);
    let bytes = checkpoint::to_bytes(&params);
    match checkpoint::from_bytes(&bytes) {
        Ok(back) if back == params => {
            Check::pass("checkpoint-roundtrip", format!("{} params, {} bytes", params.len(), bytes.len()))
        }
        Ok(_) => Check::fail("checkpoint-roundtrip", "decoded params differ".to_string()),
        Err(e) => Check::fail("checkpoint-roundtrip", format!("decode failed: {e}")),
    }
}

fn check_warp_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9A9A);
    let geom = FeatGeom::desk();
    let vals: Vec<f32> =
        (0..2 * geom.hw * geom.hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(vals.clone(), vec![2, geom.hw, geom.hw]).unwrap();
    let plan = build_warp_plan(&geom, &Pose::identity().planar());
    let y = warp_to_receiver(&mut tape, x, plan).unwrap();
    let ok = tape.data(y).iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits());
    if ok {
        Check::pass("warp-identity", "identity transform reproduces the map bitwise".to_string())
    } else {
        Check::fail("warp-identity", "identity warp altered values".to_string())
    }
}

fn check_flow_zero_gap(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF10);
    let n = 64;
    let flow = FeatureFlow {
        timestamp: 3.5,
        feature: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        derivative: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    };
    match flow.predict(flow.timestamp) {
        Ok(out) if out.iter().zip(&flow.feature).all(|(a, b)| a.to_bits() == b.to_bits()) => {
            Check::pass("flow-zero-gap", "zero staleness returns the features bitwise".to_string())
        }
        Ok(_) => Check::fail("flow-zero-gap", "zero-gap prediction altered the features".to_string()),
        Err(e) => Check::fail("flow-zero-gap", format!("zero-gap prediction failed: {e}")),
    }
}

/// Runs every check. The whole suite is a few seconds of compute.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check_op_gradients(seed),
        check_conv_oracle(seed),
        check_ap_formula(seed),
        check_wire_safety(seed),
        check_byte_accounting(),
        check_checkpoint_roundtrip(seed),
        check_warp_identity(seed),
        check_flow_zero_gap(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_self_check_suite_passes_on_a_correct_build() {
        for c in run_all(11) {
            assert!(c.passed, "self-check {} failed: {}", c.name, c.detail);
        }
    }

    #[test]
    fn checks_cover_every_declared_area() {
        let names: Vec<&str> = run_all(3).iter().map(|c| c.name).collect();
        for want in [
            "op-gradients",
            "conv-oracle",
            "ap-formula",
            "wire-safety",
            "byte-accounting",
            "checkpoint-roundtrip",
            "warp-identity",
            "flow-zero-gap",
        ] {
            assert!(names.contains(&want), "missing self-check {want}");
        }
    }
}
