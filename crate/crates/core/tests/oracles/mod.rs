//! Reference implementations used by the integration tests. Each one is a
//! direct, unoptimized transcription of the definition and shares no code
//! with the library.

#![allow(dead_code)]

/// Six-loop cross-correlation over NCHW input and OIHW kernels with zero
/// padding.
pub fn naive_conv2d(
    input: &[f64],
    in_shape: [usize; 4],
    kernel: &[f64],
    k_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = in_shape;
    let [o, kc, kh, kw] = k_shape;
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Top-two and bottom-two cells of a row-major `rows×cols` score grid by a
/// stable full sort: `[best, second, worst, second worst]`.
pub fn sort_select(scores: &[f64], cols: usize) -> [(usize, usize); 4] {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort on descending score keeps equal scores in row-major order.
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let n = idx.len();
    let cell = |i: usize| (i / cols, i % cols);
    [cell(idx[0]), cell(idx[1]), cell(idx[n - 1]), cell(idx[n - 2])]
}

/// Contrastive patch loss written as the two negative log-softmax terms.
pub fn cpe_direct(u1: &[f64], u2: &[f64], v1: &[f64], v2: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let cross: f64 = [dot(u1, v1), dot(u1, v2), dot(u2, v1), dot(u2, v2)].iter().map(|c| c.exp()).sum();
    let pu = dot(u1, u2).exp();
    let pv = dot(v1, v2).exp();
    -(pu / (pu + cross)).ln() - (pv / (pv + cross)).ln()
}

/// Voting rule by explicit counting: `(flipped, final_label, non_supporting)`.
pub fn brute_vote(original_prob: f64, masked: &[f64], theta: f64) -> (bool, u8, usize) {
    let positive = original_prob > 0.5;
    let mut against = 0;
    for &p in masked {
        let supports = if positive { p >= theta } else { p <= 1.0 - theta };
        if !supports {
            against += 1;
        }
    }
    let flipped = 2 * against > masked.len();
    let original = u8::from(positive);
    (flipped, if flipped { 1 - original } else { original }, against)
}

/// Numerically plain binary cross-entropy on a logit.
pub fn bce_direct(logit: f64, target: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}
