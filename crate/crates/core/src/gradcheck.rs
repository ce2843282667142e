//! Finite-difference validation of tape gradients.
//!
//! Every differentiable op gets an independent f64 mirror of its forward
//! math. A trial records the op on a tape, scalarizes the output with a
//! random fixed projection, runs `backward`, and compares the analytic
//! leaf gradients against central differences of the mirror. Inputs are
//! sampled away from the ops' kinks (relu and |·| at 0, the Huber elbow,
//! pillar argmax ties) so the differences measure the smooth branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PillarBatch, PillarGroup, Tape, TensorId, WarpPlan, WarpTap};
use crate::oracle;

/// Which op a trial exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOp {
    Conv2d,
    Deconv2d,
    Relu,
    Linear,
    ConcatCh,
    Affine,
    Add,
    Sum,
    WeightedSum,
    CosineSim,
    L1Norm,
    L2Norm,
    RescaleL1,
    PillarEmbed,
    WarpBev,
    FocalBce,
    SmoothL1,
}

pub const ALL_OPS: [CheckOp; 17] = [
    CheckOp::Conv2d,
    CheckOp::Deconv2d,
    CheckOp::Relu,
    CheckOp::Linear,
    CheckOp::ConcatCh,
    CheckOp::Affine,
    CheckOp::Add,
    CheckOp::Sum,
    CheckOp::WeightedSum,
    CheckOp::CosineSim,
    CheckOp::L1Norm,
    CheckOp::L2Norm,
    CheckOp::RescaleL1,
    CheckOp::PillarEmbed,
    CheckOp::WarpBev,
    CheckOp::FocalBce,
    CheckOp::SmoothL1,
];

/// A recorded op plus the f64 mirror of its forward pass.
struct Trial {
    tape: Tape,
    /// Output tensor to scalarize.
    out: TensorId,
    /// Leaves whose gradients are under test, in mirror input order.
    leaves: Vec<TensorId>,
    /// Maps the concatenated leaf vector to the mirror's output values.
    mirror: Box<dyn FnMut(&[f64]) -> Vec<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values with |v| ≥ margin, for kinked ops.
fn uniform_margin(rng: &mut ChaCha8Rng, n: usize, hi: f32, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn build(op: CheckOp, rng: &mut ChaCha8Rng) -> Trial {
    match op {
        CheckOp::Conv2d => {
            let ci = rng.gen_range(1..=3);
            let co = rng.gen_range(1..=3);
            let k = *[1usize, 3].get(rng.gen_range(0..2)).unwrap();
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
            if h + 2 * pad < k {
                return build(op, rng);
            }
            let x = uniform(rng, ci * h * w, -1.0, 1.0);
            let wgt = uniform(rng, co * ci * k * k, -0.7, 0.7);
            let b = uniform(rng, co, -0.3, 0.3);
            let mut tape = Tape::new();
            let xt = tape.tensor(x.clone(), vec![ci, h, w], true).unwrap();
            let wt = tape.tensor(wgt.clone(), vec![co, ci, k, k], true).unwrap();
            let bt = tape.tensor(b.clone(), vec![co], true).unwrap();
            let out = tape.conv2d(xt, wt, bt, stride, pad).unwrap();
            let (nx, nw) = (x.len(), wgt.len());
            let mirror = move |v: &[f64]| {
                let (xs, rest) = v.split_at(nx);
                let (ws, bs) = rest.split_at(nw);
                oracle::conv2d_ref(xs, ci, h, w, ws, co, k, k, bs, stride, pad).0
            };
            Trial { tape, out, leaves: vec![xt, wt, bt], mirror: Box::new(mirror) }
        }
        CheckOp::Deconv2d => {
            let ci = rng.gen_range(1..=3);
            let co = rng.gen_range(1..=3);
            let k = rng.gen_range(2..=4);
            let stride = rng.gen_range(1..=2);
            let pad = if k > 2 { rng.gen_range(0..=1) } else { 0 };
            let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
            let x = uniform(rng, ci * h * w, -1.0, 1.0);
            let wgt = uniform(rng, ci * co * k * k, -0.7, 0.7);
            let b = uniform(rng, co, -0.3, 0.3);
            let mut tape = Tape::new();
            let xt = tape.tensor(x.clone(), vec![ci, h, w], true).unwrap();
            let wt = tape.tensor(wgt.clone(), vec![ci, co, k, k], true).unwrap();
            let bt = tape.tensor(b.clone(), vec![co], true).unwrap();
            let out = tape.deconv2d(xt, wt, bt, stride, pad).unwrap();
            let (nx, nw) = (x.len(), wgt.len());
            let mirror = move |v: &[f64]| {
                let (xs, rest) = v.split_at(nx);
                let (ws, bs) = rest.split_at(nw);
                oracle::deconv2d_ref(xs, ci, h, w, ws, co, k, k, bs, stride, pad).0
            };
            Trial { tape, out, leaves: vec![xt, wt, bt], mirror: Box::new(mirror) }
        }
        CheckOp::Relu => {
            let n = rng.gen_range(4..=32);
            let x = uniform_margin(rng, n, 2.0, 0.1);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.relu(xt).unwrap();
            let mirror = move |v: &[f64]| v.iter().map(|&x| x.max(0.0)).collect();
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::Linear => {
            let rows = rng.gen_range(1..=4);
            let n = rng.gen_range(2..=6);
            let m = rng.gen_range(1..=5);
            let x = uniform(rng, rows * n, -1.0, 1.0);
            let wgt = uniform(rng, m * n, -0.8, 0.8);
            let b = uniform(rng, m, -0.3, 0.3);
            let mut tape = Tape::new();
            let shape = if rows == 1 && rng.gen_bool(0.5) { vec![n] } else { vec![rows, n] };
            let xt = tape.tensor(x.clone(), shape, true).unwrap();
            let wt = tape.tensor(wgt.clone(), vec![m, n], true).unwrap();
            let bt = tape.tensor(b.clone(), vec![m], true).unwrap();
            let out = tape.linear(xt, wt, bt).unwrap();
            let (nx, nw) = (x.len(), wgt.len());
            let mirror = move |v: &[f64]| {
                let (xs, rest) = v.split_at(nx);
                let (ws, bs) = rest.split_at(nw);
                let mut out = vec![0.0; rows * m];
                for r in 0..rows {
                    for j in 0..m {
                        let mut acc = bs[j];
                        for i in 0..n {
                            acc += xs[r * n + i] * ws[j * n + i];
                        }
                        out[r * m + j] = acc;
                    }
                }
                out
            };
            Trial { tape, out, leaves: vec![xt, wt, bt], mirror: Box::new(mirror) }
        }
        CheckOp::ConcatCh => {
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let ca = rng.gen_range(1..=3);
            let cb = rng.gen_range(1..=3);
            let a = uniform(rng, ca * h * w, -1.0, 1.0);
            let b = uniform(rng, cb * h * w, -1.0, 1.0);
            let mut tape = Tape::new();
            let at = tape.tensor(a.clone(), vec![ca, h, w], true).unwrap();
            let bt = tape.tensor(b.clone(), vec![cb, h, w], true).unwrap();
            let out = tape.concat_channels(at, bt).unwrap();
            let mirror = move |v: &[f64]| v.to_vec();
            Trial { tape, out, leaves: vec![at, bt], mirror: Box::new(mirror) }
        }
        CheckOp::Affine => {
            let n = rng.gen_range(3..=16);
            let x = uniform(rng, n, -2.0, 2.0);
            let mul = rng.gen_range(-1.5..1.5f32);
            let add = rng.gen_range(-1.0..1.0f32);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.affine(xt, mul, add).unwrap();
            let (m64, a64) = (mul as f64, add as f64);
            let mirror = move |v: &[f64]| v.iter().map(|&x| x * m64 + a64).collect();
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::Add => {
            let n = rng.gen_range(3..=16);
            let a = uniform(rng, n, -2.0, 2.0);
            let b = uniform(rng, n, -2.0, 2.0);
            let mut tape = Tape::new();
            let at = tape.tensor(a, vec![n], true).unwrap();
            let bt = tape.tensor(b, vec![n], true).unwrap();
            let out = tape.add(at, bt).unwrap();
            let mirror = move |v: &[f64]| {
                let (xs, ys) = v.split_at(n);
                xs.iter().zip(ys).map(|(&x, &y)| x + y).collect()
            };
            Trial { tape, out, leaves: vec![at, bt], mirror: Box::new(mirror) }
        }
        CheckOp::Sum => {
            let n = rng.gen_range(3..=16);
            let x = uniform(rng, n, -2.0, 2.0);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.sum(xt).unwrap();
            let mirror = move |v: &[f64]| vec![v.iter().sum()];
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::WeightedSum => {
            let n = rng.gen_range(3..=16);
            let x = uniform(rng, n, -2.0, 2.0);
            let w = uniform(rng, n, -1.0, 1.0);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.weighted_sum(xt, w.clone()).unwrap();
            let w64 = to64(&w);
            let mirror = move |v: &[f64]| vec![v.iter().zip(&w64).map(|(&x, &w)| x * w).sum()];
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::CosineSim => {
            let n = rng.gen_range(3..=24);
            let a = uniform_margin(rng, n, 2.0, 0.05);
            let b = uniform_margin(rng, n, 2.0, 0.05);
            let mut tape = Tape::new();
            let at = tape.tensor(a, vec![n], true).unwrap();
            let bt = tape.tensor(b, vec![n], true).unwrap();
            let out = tape.cosine_similarity(at, bt).unwrap();
            let mirror = move |v: &[f64]| {
                let (xs, ys) = v.split_at(n);
                let dot: f64 = xs.iter().zip(ys).map(|(&x, &y)| x * y).sum();
                let na: f64 = xs.iter().map(|&x| x * x).sum::<f64>().sqrt();
                let nb: f64 = ys.iter().map(|&y| y * y).sum::<f64>().sqrt();
                vec![dot / (na * nb)]
            };
            Trial { tape, out, leaves: vec![at, bt], mirror: Box::new(mirror) }
        }
        CheckOp::L1Norm => {
            let n = rng.gen_range(3..=24);
            let x = uniform_margin(rng, n, 2.0, 0.1);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.l1_norm(xt).unwrap();
            let mirror = move |v: &[f64]| vec![v.iter().map(|&x| x.abs()).sum()];
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::L2Norm => {
            let n = rng.gen_range(3..=24);
            let x = uniform_margin(rng, n, 2.0, 0.05);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.l2_norm(xt).unwrap();
            let mirror = move |v: &[f64]| vec![v.iter().map(|&x| x * x).sum::<f64>().sqrt()];
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::RescaleL1 => {
            let n = rng.gen_range(3..=24);
            let x = uniform_margin(rng, n, 2.0, 0.1);
            let r = uniform_margin(rng, n, 2.0, 0.1);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let rt = tape.tensor(r, vec![n], true).unwrap();
            let out = tape.rescale_l1(xt, rt).unwrap();
            let mirror = move |v: &[f64]| {
                let (xs, rs) = v.split_at(n);
                let lx: f64 = xs.iter().map(|&x| x.abs()).sum();
                let lr: f64 = rs.iter().map(|&x| x.abs()).sum();
                xs.iter().map(|&x| x * lr / lx).collect()
            };
            Trial { tape, out, leaves: vec![xt, rt], mirror: Box::new(mirror) }
        }
        CheckOp::PillarEmbed => {
            // Resample until every (pillar, channel) has a clear argmax
            // winner and sits away from the relu kink; FD needs margins.
            'outer: loop {
                let c_n = rng.gen_range(2..=4);
                let in_dim = rng.gen_range(2..=5);
                let (ny, nx) = (3, 3);
                let n_groups = rng.gen_range(1..=4);
                let mut cells: Vec<usize> = (0..ny * nx).collect();
                for i in (1..cells.len()).rev() {
                    cells.swap(i, rng.gen_range(0..=i));
                }
                let groups: Vec<PillarGroup> = (0..n_groups)
                    .map(|g| {
                        let n_pts = rng.gen_range(1..=4);
                        PillarGroup { cell: cells[g], feats: uniform(rng, n_pts * in_dim, -1.0, 1.0) }
                    })
                    .collect();
                let w = uniform(rng, c_n * in_dim, -0.8, 0.8);
                let b = uniform(rng, c_n, -0.3, 0.3);
                // Margin screen in f64.
                for g in &groups {
                    let n_pts = g.feats.len() / in_dim;
                    for c in 0..c_n {
                        let mut pre: Vec<f64> = (0..n_pts)
                            .map(|p| {
                                let mut acc = b[c] as f64;
                                for d in 0..in_dim {
                                    acc += w[c * in_dim + d] as f64 * g.feats[p * in_dim + d] as f64;
                                }
                                acc
                            })
                            .collect();
                        pre.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        if pre[0].abs() < 0.05 || (pre.len() > 1 && pre[0] - pre[1] < 0.05) {
                            continue 'outer;
                        }
                    }
                }
                let batch = PillarBatch { in_dim, ny, nx, groups: groups.clone() };
                let mut tape = Tape::new();
                let wt = tape.tensor(w.clone(), vec![c_n, in_dim], true).unwrap();
                let bt = tape.tensor(b.clone(), vec![c_n], true).unwrap();
                let out = tape.pillar_embed(wt, bt, batch).unwrap();
                let nw = w.len();
                let mirror = move |v: &[f64]| {
                    let (ws, bs) = v.split_at(nw);
                    let mut out = vec![0.0; c_n * ny * nx];
                    for g in &groups {
                        let n_pts = g.feats.len() / in_dim;
                        for c in 0..c_n {
                            let mut best = f64::NEG_INFINITY;
                            for p in 0..n_pts {
                                let mut acc = bs[c];
                                for d in 0..in_dim {
                                    acc += ws[c * in_dim + d] * g.feats[p * in_dim + d] as f64;
                                }
                                best = best.max(acc);
                            }
                            out[c * ny * nx + g.cell] = best.max(0.0);
                        }
                    }
                    out
                };
                return Trial { tape, out, leaves: vec![wt, bt], mirror: Box::new(mirror) };
            }
        }
        CheckOp::WarpBev => {
            let c = rng.gen_range(1..=3);
            let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
            let (ho, wo) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let in_spatial = h * w;
            let taps: Vec<WarpTap> = (0..ho * wo)
                .map(|_| {
                    let mut t = WarpTap::default();
                    for k in 0..4 {
                        t.idx[k] = rng.gen_range(0..in_spatial) as u32;
                        t.wgt[k] = rng.gen_range(0.0..0.5);
                    }
                    t
                })
                .collect();
            let plan = WarpPlan { h_in: h, w_in: w, h_out: ho, w_out: wo, taps: taps.clone() };
            let x = uniform(rng, c * in_spatial, -1.0, 1.0);
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![c, h, w], true).unwrap();
            let out = tape.warp_bev(xt, plan).unwrap();
            let mirror = move |v: &[f64]| {
                let mut out = vec![0.0; c * ho * wo];
                for ch in 0..c {
                    for (cell, t) in taps.iter().enumerate() {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            acc += t.wgt[k] as f64 * v[ch * in_spatial + t.idx[k] as usize];
                        }
                        out[ch * ho * wo + cell] = acc;
                    }
                }
                out
            };
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::FocalBce => {
            let n = rng.gen_range(8..=24);
            let x = uniform(rng, n, -3.0, 3.0);
            let mut idx: Vec<u32> = (0..n as u32).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let n_pos = rng.gen_range(1..=n / 2);
            let pos: Vec<u32> = idx[..n_pos].to_vec();
            let neg: Vec<u32> = idx[n_pos..].to_vec();
            let (alpha, gamma) = (0.25, 2.0);
            let norm = n_pos as f64;
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape.focal_bce(xt, pos.clone(), neg.clone(), alpha, gamma, norm).unwrap();
            let mirror = move |v: &[f64]| {
                let mut acc = 0.0;
                for &i in &pos {
                    let z = v[i as usize];
                    let p = 1.0 / (1.0 + (-z).exp());
                    acc += alpha * (1.0 - p).powf(gamma) * -(p.ln());
                }
                for &i in &neg {
                    let z = v[i as usize];
                    let p = 1.0 / (1.0 + (-z).exp());
                    acc += (1.0 - alpha) * p.powf(gamma) * -((1.0 - p).ln());
                }
                vec![acc / norm]
            };
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
        CheckOp::SmoothL1 => {
            let n = rng.gen_range(8..=24);
            let x = uniform(rng, n, -2.0, 2.0);
            let count = rng.gen_range(1..=n);
            let mut order: Vec<u32> = (0..n as u32).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let idx: Vec<u32> = order[..count].to_vec();
            // Keep each residual away from the Huber elbow at |e| = 1.
            let target: Vec<f32> = idx
                .iter()
                .map(|&i| {
                    let mut e = rng.gen_range(-1.8..1.8f32);
                    while (e.abs() - 1.0).abs() < 0.1 {
                        e = rng.gen_range(-1.8..1.8f32);
                    }
                    x[i as usize] - e
                })
                .collect();
            let weight = uniform(rng, count, 0.2, 1.5);
            let norm = count as f64;
            let mut tape = Tape::new();
            let xt = tape.tensor(x, vec![n], true).unwrap();
            let out = tape
                .smooth_l1(xt, idx.clone(), target.clone(), weight.clone(), norm)
                .unwrap();
            let t64 = to64(&target);
            let w64 = to64(&weight);
            let mirror = move |v: &[f64]| {
                let mut acc = 0.0;
                for k in 0..idx.len() {
                    let e = v[idx[k] as usize] - t64[k];
                    let a = e.abs();
                    acc += w64[k] * if a <= 1.0 { 0.5 * e * e } else { a - 0.5 };
                }
                vec![acc / norm]
            };
            Trial { tape, out, leaves: vec![xt], mirror: Box::new(mirror) }
        }
    }
}

/// Runs `trials` random instances of `op` and returns the worst relative
/// disagreement between analytic and finite-difference gradients.
pub fn max_rel_error(op: CheckOp, trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut trial = build(op, &mut rng);
        let out_n = trial.tape.data(trial.out).len();
        let proj: Vec<f32> = (0..out_n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = trial.tape.weighted_sum(trial.out, proj.clone()).unwrap();
        trial.tape.backward(loss).unwrap();

        let mut x0: Vec<f64> = Vec::new();
        let mut analytic: Vec<f64> = Vec::new();
        for &leaf in &trial.leaves {
            x0.extend(trial.tape.data(leaf).iter().map(|&v| v as f64));
            let g = trial
                .tape
                .grad(leaf)
                .expect("leaf under test has no gradient");
            analytic.extend(g.iter().map(|&v| v as f64));
        }
        let proj64 = to64(&proj);
        let mirror = &mut trial.mirror;
        let mut scalar = |v: &[f64]| -> f64 {
            mirror(v).iter().zip(&proj64).map(|(&o, &p)| o * p).sum()
        };
        let numeric = oracle::finite_difference(&mut scalar, &x0, h);
        worst = worst.max(oracle::max_grad_error(&analytic, &numeric));
    }
    worst
}
