//! Independent reference implementations used to check the production
//! kernels. Everything here is deliberately naive (plain nested loops, f64
//! throughout) and shares no code with the optimized paths it validates.

/// Cross-correlation with zero padding, six explicit loops.
/// `input` is `[c_in, h, w]`, `weight` `[c_out, c_in, kh, kw]`, `bias`
/// `[c_out]`; returns `(out, [c_out, oh, ow])`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 3]) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                let iv = input[(ci * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * c_in + ci) * kh + ky) * kw + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, [c_out, oh, ow])
}

/// Transposed convolution as a direct scatter of the definition
/// `out[oy,ox] += in[iy,ix]·w[ky,kx]` at `oy = iy·s − p + ky`.
/// `weight` is `[c_in, c_out, kh, kw]` (adjoint layout of `conv2d_ref`).
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_ref(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 3]) {
    let oh = (h - 1) * stride + kh - 2 * padding;
    let ow = (w - 1) * stride + kw - 2 * padding;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for v in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
            *v = bias[co];
        }
    }
    for ci in 0..c_in {
        for iy in 0..h {
            for ix in 0..w {
                let iv = input[(ci * h + iy) * w + ix];
                for co in 0..c_out {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (iy * stride + ky) as isize - padding as isize;
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if oy >= 0 && oy < oh as isize && ox >= 0 && ox < ow as isize {
                                let wv = weight[((ci * c_out + co) * kh + ky) * kw + kx];
                                out[(co * oh + oy as usize) * ow + ox as usize] += iv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [c_out, oh, ow])
}

/// Central finite difference of `f` at `x`, one partial per element.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Elementwise comparison rule for gradients: relative where the values have
/// scale, absolute once both are below 1. Returns the worst error found.
pub fn max_grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1.0);
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

/// 11-point interpolated average precision computed straight from the
/// definition: AP = (1/11) Σ_r max_{r̃ ≥ r} p(r̃) over r ∈ {0.0, 0.1, …, 1.0}.
/// `curve` holds (recall, precision) sample points in any order.
pub fn eleven_point_ap_ref(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(rc, _)| *rc >= r - 1e-12)
            .map(|(_, pc)| *pc)
            .fold(0.0f64, f64::max);
        total += p;
    }
    total / 11.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_ref_hand_example_3x3_ones() {
        // 1×3×3 input 1..9, single 3×3 ones kernel, stride 1, pad 1.
        // Center output = sum(1..=9) = 45.
        let input: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let weight = vec![1.0; 9];
        let (out, shape) = conv2d_ref(&input, 1, 3, 3, &weight, 1, 3, 3, &[0.0], 1, 1);
        assert_eq!(shape, [1, 3, 3]);
        assert_eq!(out[4], 45.0);
        // Corner output sees the 2×2 window {1,2,4,5}.
        assert_eq!(out[0], 12.0);
    }

    #[test]
    fn deconv_ref_hand_example_broadcast() {
        // 1×1×1 input [5], 1×1×2×2 ones weight, stride 2, pad 0 → 2×2 of 5.
        let (out, shape) = deconv2d_ref(&[5.0], 1, 1, 1, &[1.0; 4], 1, 2, 2, &[0.0], 2, 0);
        assert_eq!(shape, [1, 2, 2]);
        assert_eq!(out, vec![5.0; 4]);
    }

    #[test]
    fn finite_difference_of_quadratic_is_linear() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = finite_difference(&mut f, &x, 1e-4);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_grad_error(&expect, &g) < 1e-8);
    }

    #[test]
    fn ap_ref_perfect_detector_is_one() {
        let curve = vec![(1.0, 1.0)];
        assert!((eleven_point_ap_ref(&curve) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_ref_half_recall_perfect_precision_is_six_elevenths() {
        let curve = vec![(0.5, 1.0)];
        assert!((eleven_point_ap_ref(&curve) - 6.0 / 11.0).abs() < 1e-12);
    }
}
