//! Numeric kernels behind the tape ops. All layouts are row-major flat
//! `f32` slices; shapes are passed explicitly and validated by the caller.
//!
//! Parallel kernels split work over independent output slices (channels)
//! with a fixed accumulation order inside each slice, so results are bitwise
//! identical for any thread count. `Exec::Seq` forces the single-threaded
//! path; benchmarks compare it against `Exec::Auto`.

use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    /// Parallel when the `parallel` feature is enabled.
    Auto,
    /// Always single-threaded.
    Seq,
}

fn run_chunks<T: Send, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    match exec {
        Exec::Auto => par::for_each_chunk_mut(data, chunk, f),
        Exec::Seq => par::for_each_chunk_mut_seq(data, chunk, f),
    }
}

/// Valid output range for the relation `0 <= o*stride + k - pad < in_len`,
/// clipped to `[0, out_len)`. Shared by every conv-family loop.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len + pad - k - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Output spatial size of a convolution (floor division).
pub fn conv_out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (in_len - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return None;
    }
    Some(grown - 2 * pad)
}

// ── Convolution ──────────────────────────────────────────────────────────

/// `x: [ci,h,w] ⋆ wgt: [co,ci,kh,kw] (+bias) → out: [co,oh,ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    exec: Exec,
    x: &[f32],
    ci_n: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    kh: usize,
    kw: usize,
    bias: &[f32],
    stride: usize,
    pad: usize,
    out: &mut [f32],
    oh: usize,
    ow: usize,
) {
    run_chunks(exec, out, oh * ow, |co, out_c| {
        out_c.fill(bias[co]);
        for ci in 0..ci_n {
            let x_c = &x[ci * h * w..][..h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wgt[((co * ci_n + ci) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let x_row = &x_c[iy * w..][..w];
                        let out_row = &mut out_c[oy * ow..][..ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            let src = &x_row[ix0..][..n];
                            let dst = &mut out_row[ox_lo..][..n];
                            for i in 0..n {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `∂L/∂x` of conv2d into `gin` (shape `[ci,h,w]`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    exec: Exec,
    g: &[f32],
    co_n: usize,
    oh: usize,
    ow: usize,
    wgt: &[f32],
    ci_n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gin: &mut [f32],
    h: usize,
    w: usize,
) {
    run_chunks(exec, gin, h * w, |ci, gin_c| {
        for co in 0..co_n {
            let g_c = &g[co * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wgt[((co * ci_n + ci) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let g_row = &g_c[oy * ow..][..ow];
                        let gin_row = &mut gin_c[iy * w..][..w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            let src = &g_row[ox_lo..][..n];
                            let dst = &mut gin_row[ix0..][..n];
                            for i in 0..n {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                gin_row[ox * stride + kx - pad] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `∂L/∂wgt` of conv2d into `gw` (shape `[co,ci,kh,kw]`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_weight(
    exec: Exec,
    g: &[f32],
    oh: usize,
    ow: usize,
    x: &[f32],
    ci_n: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    gw: &mut [f32],
    kh: usize,
    kw: usize,
) {
    run_chunks(exec, gw, ci_n * kh * kw, |co, gw_c| {
        let g_c = &g[co * oh * ow..][..oh * ow];
        for ci in 0..ci_n {
            let x_c = &x[ci * h * w..][..h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                    let mut acc = 0.0f64;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let g_row = &g_c[oy * ow..][..ow];
                        let x_row = &x_c[iy * w..][..w];
                        let mut row = 0.0f32;
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            for i in 0..(ox_hi - ox_lo) {
                                row += g_row[ox_lo + i] * x_row[ix0 + i];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row += g_row[ox] * x_row[ox * stride + kx - pad];
                            }
                        }
                        acc += row as f64;
                    }
                    gw_c[(ci * kh + ky) * kw + kx] += acc as f32;
                }
            }
        }
    });
}

/// Accumulates `∂L/∂bias` (sum of `g` over spatial positions per channel).
pub fn conv2d_backward_bias(g: &[f32], co_n: usize, spatial: usize, gb: &mut [f32]) {
    for co in 0..co_n {
        let mut acc = 0.0f64;
        for &v in &g[co * spatial..][..spatial] {
            acc += v as f64;
        }
        gb[co] += acc as f32;
    }
}

// ── Transposed convolution ───────────────────────────────────────────────
//
// Weight layout is the adjoint of conv2d: `[ci, co, kh, kw]` where `ci` is
// the deconv input channel count. With the same weight tensor,
// `<conv2d(x, W), y> == <x, deconv2d(y, W)>`.

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_forward(
    exec: Exec,
    x: &[f32],
    ci_n: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    co_n: usize,
    kh: usize,
    kw: usize,
    bias: &[f32],
    stride: usize,
    pad: usize,
    out: &mut [f32],
    oh: usize,
    ow: usize,
) {
    run_chunks(exec, out, oh * ow, |co, out_c| {
        out_c.fill(bias[co]);
        for ci in 0..ci_n {
            let x_c = &x[ci * h * w..][..h * w];
            for ky in 0..kh {
                // iy valid iff 0 <= iy*stride + ky - pad < oh.
                let (iy_lo, iy_hi) = valid_range(ky, pad, stride, oh, h);
                for kx in 0..kw {
                    let wv = wgt[((ci * co_n + co) * kh + ky) * kw + kx];
                    let (ix_lo, ix_hi) = valid_range(kx, pad, stride, ow, w);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    for iy in iy_lo..iy_hi {
                        let oy = iy * stride + ky - pad;
                        let x_row = &x_c[iy * w..][..w];
                        let out_row = &mut out_c[oy * ow..][..ow];
                        if stride == 1 {
                            let ox0 = ix_lo + kx - pad;
                            let n = ix_hi - ix_lo;
                            let src = &x_row[ix_lo..][..n];
                            let dst = &mut out_row[ox0..][..n];
                            for i in 0..n {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for ix in ix_lo..ix_hi {
                                out_row[ix * stride + kx - pad] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `∂L/∂x` of deconv2d into `gin` (shape `[ci,h,w]`); this is
/// the conv-style gather with the transposed weight layout.
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward_input(
    exec: Exec,
    g: &[f32],
    co_n: usize,
    oh: usize,
    ow: usize,
    wgt: &[f32],
    ci_n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gin: &mut [f32],
    h: usize,
    w: usize,
) {
    debug_assert_eq!(gin.len(), ci_n * h * w);
    run_chunks(exec, gin, h * w, |ci, gin_c| {
        for co in 0..co_n {
            let g_c = &g[co * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let (iy_lo, iy_hi) = valid_range(ky, pad, stride, oh, h);
                for kx in 0..kw {
                    let wv = wgt[((ci * co_n + co) * kh + ky) * kw + kx];
                    let (ix_lo, ix_hi) = valid_range(kx, pad, stride, ow, w);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    for iy in iy_lo..iy_hi {
                        let oy = iy * stride + ky - pad;
                        let g_row = &g_c[oy * ow..][..ow];
                        let gin_row = &mut gin_c[iy * w..][..w];
                        if stride == 1 {
                            let ox0 = ix_lo + kx - pad;
                            let n = ix_hi - ix_lo;
                            let src = &g_row[ox0..][..n];
                            let dst = &mut gin_row[ix_lo..][..n];
                            for i in 0..n {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for ix in ix_lo..ix_hi {
                                gin_row[ix] += wv * g_row[ix * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `∂L/∂wgt` of deconv2d into `gw` (shape `[ci,co,kh,kw]`).
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward_weight(
    exec: Exec,
    g: &[f32],
    co_n: usize,
    oh: usize,
    ow: usize,
    x: &[f32],
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    gw: &mut [f32],
    kh: usize,
    kw: usize,
) {
    run_chunks(exec, gw, co_n * kh * kw, |ci, gw_c| {
        let x_c = &x[ci * h * w..][..h * w];
        for co in 0..co_n {
            let g_c = &g[co * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let (iy_lo, iy_hi) = valid_range(ky, pad, stride, oh, h);
                for kx in 0..kw {
                    let (ix_lo, ix_hi) = valid_range(kx, pad, stride, ow, w);
                    let mut acc = 0.0f64;
                    for iy in iy_lo..iy_hi {
                        let oy = iy * stride + ky - pad;
                        let x_row = &x_c[iy * w..][..w];
                        let g_row = &g_c[oy * ow..][..ow];
                        let mut row = 0.0f32;
                        if stride == 1 {
                            let ox0 = ix_lo + kx - pad;
                            for i in 0..(ix_hi - ix_lo) {
                                row += x_row[ix_lo + i] * g_row[ox0 + i];
                            }
                        } else {
                            for ix in ix_lo..ix_hi {
                                row += x_row[ix] * g_row[ix * stride + kx - pad];
                            }
                        }
                        acc += row as f64;
                    }
                    gw_c[(co * kh + ky) * kw + kx] += acc as f32;
                }
            }
        }
    });
}

// ── Linear ───────────────────────────────────────────────────────────────

/// `x: [rows,n] · wgtᵀ (+bias) → out: [rows,m]` with `wgt: [m,n]`.
pub fn linear_forward(x: &[f32], rows: usize, n: usize, wgt: &[f32], m: usize, bias: &[f32], out: &mut [f32]) {
    for r in 0..rows {
        let x_row = &x[r * n..][..n];
        let out_row = &mut out[r * m..][..m];
        for (mi, o) in out_row.iter_mut().enumerate() {
            let w_row = &wgt[mi * n..][..n];
            let mut acc = bias[mi];
            for i in 0..n {
                acc += w_row[i] * x_row[i];
            }
            *o = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    g: &[f32],
    rows: usize,
    m: usize,
    x: &[f32],
    n: usize,
    wgt: &[f32],
    gx: &mut [f32],
    gw: &mut [f32],
    gb: &mut [f32],
) {
    for r in 0..rows {
        let g_row = &g[r * m..][..m];
        let x_row = &x[r * n..][..n];
        let gx_row = &mut gx[r * n..][..n];
        for mi in 0..m {
            let gv = g_row[mi];
            let w_row = &wgt[mi * n..][..n];
            let gw_row = &mut gw[mi * n..][..n];
            for i in 0..n {
                gx_row[i] += gv * w_row[i];
                gw_row[i] += gv * x_row[i];
            }
            gb[mi] += gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn forward_matches_six_loop_reference_over_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..30 {
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let h = rng.gen_range(3..9);
            let w = rng.gen_range(3..9);
            let k = [1, 3, 5][trial % 3];
            if h < k || w < k {
                continue;
            }
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let x = rand_vec(&mut rng, ci * h * w);
            let wgt = rand_vec(&mut rng, co * ci * k * k);
            let b = rand_vec(&mut rng, co);
            let oh = conv_out_len(h, k, stride, pad).unwrap();
            let ow = conv_out_len(w, k, stride, pad).unwrap();
            let mut out = vec![0.0f32; co * oh * ow];
            conv2d_forward(Exec::Auto, &x, ci, h, w, &wgt, k, k, &b, stride, pad, &mut out, oh, ow);

            let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let wd: Vec<f64> = wgt.iter().map(|&v| v as f64).collect();
            let bd: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let (refout, shape) = oracle::conv2d_ref(&xd, ci, h, w, &wd, co, k, k, &bd, stride, pad);
            assert_eq!(shape, [co, oh, ow]);
            for (a, r) in out.iter().zip(&refout) {
                assert!((*a as f64 - r).abs() < 1e-5, "conv deviates from reference");
            }
        }
    }

    #[test]
    fn seq_and_auto_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (ci, co, h, w, k, stride, pad) = (3, 5, 17, 13, 3, 2, 1);
        let x = rand_vec(&mut rng, ci * h * w);
        let wgt = rand_vec(&mut rng, co * ci * k * k);
        let b = rand_vec(&mut rng, co);
        let oh = conv_out_len(h, k, stride, pad).unwrap();
        let ow = conv_out_len(w, k, stride, pad).unwrap();
        let mut out_a = vec![0.0f32; co * oh * ow];
        let mut out_s = vec![0.0f32; co * oh * ow];
        conv2d_forward(Exec::Auto, &x, ci, h, w, &wgt, k, k, &b, stride, pad, &mut out_a, oh, ow);
        conv2d_forward(Exec::Seq, &x, ci, h, w, &wgt, k, k, &b, stride, pad, &mut out_s, oh, ow);
        assert!(out_a.iter().zip(&out_s).all(|(a, s)| a.to_bits() == s.to_bits()));
    }

    #[test]
    fn deconv_forward_matches_scatter_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let h = rng.gen_range(2..7);
            let w = rng.gen_range(2..7);
            let k = rng.gen_range(1..5);
            let stride = rng.gen_range(1..3);
            let pad = if k > 2 { rng.gen_range(0..2) } else { 0 };
            let Some(oh) = deconv_out_len(h, k, stride, pad) else { continue };
            let Some(ow) = deconv_out_len(w, k, stride, pad) else { continue };
            let x = rand_vec(&mut rng, ci * h * w);
            let wgt = rand_vec(&mut rng, ci * co * k * k);
            let b = rand_vec(&mut rng, co);
            let mut out = vec![0.0f32; co * oh * ow];
            deconv2d_forward(Exec::Auto, &x, ci, h, w, &wgt, co, k, k, &b, stride, pad, &mut out, oh, ow);

            let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let wd: Vec<f64> = wgt.iter().map(|&v| v as f64).collect();
            let bd: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let (refout, shape) = oracle::deconv2d_ref(&xd, ci, h, w, &wd, co, k, k, &bd, stride, pad);
            assert_eq!(shape, [co, oh, ow]);
            for (a, r) in out.iter().zip(&refout) {
                assert!((*a as f64 - r).abs() < 1e-5, "deconv deviates from reference");
            }
        }
    }

    #[test]
    fn deconv_broadcast_hand_example() {
        // 1×1×1 input [5], 2×2 ones weight, stride 2 → 2×2 output of 5s.
        let mut out = vec![0.0f32; 4];
        deconv2d_forward(Exec::Auto, &[5.0], 1, 1, 1, &[1.0; 4], 1, 2, 2, &[0.0], 2, 0, &mut out, 2, 2);
        assert_eq!(out, vec![5.0; 4]);
    }

    #[test]
    fn conv_then_deconv_restores_spatial_dims() {
        // conv k3 s2 p1 maps 8→4; deconv k4 s2 p1 maps 4→8.
        assert_eq!(conv_out_len(8, 3, 2, 1), Some(4));
        assert_eq!(deconv_out_len(4, 4, 2, 1), Some(8));
    }

    #[test]
    fn conv_deconv_adjoint_identity() {
        // <conv(x,W), y> == <x, deconv(y,W)> with shared weight and zero
        // bias. Shapes are chosen so the deconv restores the conv input
        // exactly (floor division in conv_out_len would otherwise truncate
        // the adjoint); with k=3, p=1 that means odd sizes at stride 2.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let zeros = [0.0f32; 8];
        for _ in 0..20 {
            let (ci, co, k, pad) = (2, 3, 3, 1);
            let stride = rng.gen_range(1usize..3);
            let pick = |rng: &mut ChaCha8Rng| {
                let v = rng.gen_range(5usize..10);
                if stride == 2 && v % 2 == 0 {
                    v + 1
                } else {
                    v
                }
            };
            let (h, w) = (pick(&mut rng), pick(&mut rng));
            let oh = conv_out_len(h, k, stride, pad).unwrap();
            let ow = conv_out_len(w, k, stride, pad).unwrap();
            assert_eq!(deconv_out_len(oh, k, stride, pad), Some(h));
            let x = rand_vec(&mut rng, ci * h * w);
            let wgt = rand_vec(&mut rng, co * ci * k * k);
            let y = rand_vec(&mut rng, co * oh * ow);

            let mut cx = vec![0.0f32; co * oh * ow];
            conv2d_forward(Exec::Auto, &x, ci, h, w, &wgt, k, k, &zeros[..co], stride, pad, &mut cx, oh, ow);
            let mut dy = vec![0.0f32; ci * h * w];
            deconv2d_forward(Exec::Auto, &y, co, oh, ow, &wgt, ci, k, k, &zeros[..ci], stride, pad, &mut dy, h, w);

            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let rhs: f64 = x.iter().zip(&dy).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-4 * (1.0 + lhs.abs()), "adjoint identity broken: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn linear_forward_hand_example() {
        // [1,2]·[[1,2],[3,4],[5,6]]ᵀ + [0.5,0.5,0.5] = [5.5, 11.5, 17.5]
        let x = [1.0, 2.0];
        let wgt = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5; 3];
        let mut out = [0.0f32; 3];
        linear_forward(&x, 1, 2, &wgt, 3, &b, &mut out);
        assert_eq!(out, [5.5, 11.5, 17.5]);
    }
}
