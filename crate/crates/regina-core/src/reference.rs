//! Naive reference implementations used as oracles by the test suites.
//!
//! Everything here is written directly from the definitions as plain nested
//! loops over flat arrays, with no tape, no shared helpers and no reuse of
//! the production code paths, so agreement is meaningful. Enabled for unit
//! tests and behind the `reference` feature for downstream test targets.

use alloc::vec;
use alloc::vec::Vec;

/// `[m, k] x [k, n]` matrix product.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Same-padded single-channel 2-D cross-correlation, odd square kernel.
pub fn naive_conv2d_same(input: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let p = (k as isize - 1) / 2;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for u in 0..k as isize {
                for v in 0..k as isize {
                    let ii = i + u - p;
                    let jj = j + v - p;
                    if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                        acc += input[(ii * w as isize + jj) as usize]
                            * kernel[(u * k as isize + v) as usize];
                    }
                }
            }
            out[(i * w as isize + j) as usize] = acc;
        }
    }
    out
}

/// Frame self-similarity: entry (p, q) is the joint-averaged displacement
/// norm between frames p and q. `data` is joint-major `[n][t][c]`.
pub fn naive_ssm(data: &[f64], n: usize, t: usize, c: usize, l1: bool) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for p in 0..t {
        for q in 0..t {
            let mut total = 0.0;
            for j in 0..n {
                let vp = &data[(j * t + p) * c..(j * t + p) * c + c];
                let vq = &data[(j * t + q) * c..(j * t + q) * c + c];
                let mut acc = 0.0;
                for d in 0..c {
                    let diff = vp[d] - vq[d];
                    acc += if l1 { libm::fabs(diff) } else { diff * diff };
                }
                total += if l1 { acc } else { libm::sqrt(acc) };
            }
            out[p * t + q] = total / n as f64;
        }
    }
    out
}

/// Row-sum symmetric normalization with the 0 -> 0 pseudo-inverse.
pub fn naive_normalize(a: &[f64], n: usize) -> Vec<f64> {
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let mut rs = 0.0;
        for j in 0..n {
            rs += a[i * n + j];
        }
        inv_sqrt[i] = if rs > 0.0 { 1.0 / libm::sqrt(rs) } else { 0.0 };
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv_sqrt[i] * a[i * n + j] * inv_sqrt[j];
        }
    }
    out
}

/// Partitioned spatial graph convolution: for each partition p,
/// `y += A_p_norm · x_frame · w_p`, frame by frame. `x` is `[c_in, t, n]`,
/// each `a_norm` is `[n, n]`, each `w` is `[c_in, c_out]`.
pub fn naive_spatial_gcn(
    x: &[f64],
    c_in: usize,
    t: usize,
    n: usize,
    a_norm: &[Vec<f64>],
    w: &[Vec<f64>],
    c_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * t * n];
    for (ap, wp) in a_norm.iter().zip(w) {
        for o in 0..c_out {
            for tau in 0..t {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..n {
                        let aji = ap[j * n + i];
                        let mut mixed = 0.0;
                        for ci in 0..c_in {
                            mixed += x[(ci * t + tau) * n + i] * wp[ci * c_out + o];
                        }
                        acc += aji * mixed;
                    }
                    out[(o * t + tau) * n + j] += acc;
                }
            }
        }
    }
    out
}

/// Temporal convolution along frames, per joint, odd tap count, zero padding
/// `(taps-1)/2`, output length `ceil(t/stride)`. `r`, when given, holds one
/// multiplier per (output frame, tap). `x` is `[c_in, t, n]`, `w` is
/// `[c_out, c_in, taps]`.
pub fn naive_temporal_conv(
    x: &[f64],
    c_in: usize,
    t: usize,
    n: usize,
    w: &[f64],
    c_out: usize,
    taps: usize,
    stride: usize,
    r: Option<&[f64]>,
) -> Vec<f64> {
    let tp = (t + stride - 1) / stride;
    let pad = (taps as isize - 1) / 2;
    let mut out = vec![0.0; c_out * tp * n];
    for o in 0..c_out {
        for tau in 0..tp {
            for j in 0..n {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for d in 0..taps {
                        let ti = (tau * stride + d) as isize - pad;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let sample = x[(ci * t + ti as usize) * n + j];
                        let weight = w[(o * c_in + ci) * taps + d];
                        let scale = r.map_or(1.0, |r| r[tau * taps + d]);
                        acc += weight * scale * sample;
                    }
                }
                out[(o * tp + tau) * n + j] = acc;
            }
        }
    }
    out
}

/// Self-similarity tap weights: smooth the SSM with `kernel` (odd, same
/// padding) when given, then read `M[tau, clamp(tau + delta)]` for each
/// output frame `tau` (stepped by `stride`) and tap offset `delta`.
pub fn naive_tap_weights(
    ssm: &[f64],
    t: usize,
    kernel: Option<(&[f64], usize)>,
    taps: usize,
    stride: usize,
) -> Vec<f64> {
    let m = match kernel {
        Some((kdata, k)) => naive_conv2d_same(ssm, t, t, kdata, k),
        None => ssm.to_vec(),
    };
    let tp = (t + stride - 1) / stride;
    let pad = (taps as isize - 1) / 2;
    let mut out = vec![0.0; tp * taps];
    for tau in 0..tp {
        let row = tau * stride;
        for d in 0..taps {
            let col = (row as isize + d as isize - pad).clamp(0, t as isize - 1) as usize;
            out[tau * taps + d] = m[row * t + col];
        }
    }
    out
}

/// Largest absolute eigenvalue by power iteration (`iters` steps).
pub fn spectral_radius(a: &[f64], n: usize, iters: usize) -> f64 {
    // Deterministic non-degenerate start vector.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 0.01).collect();
    let mut norm = 0.0;
    for _ in 0..iters {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * x[j];
            }
            y[i] = acc;
        }
        norm = libm::sqrt(y.iter().map(|v| v * v).sum::<f64>());
        if norm == 0.0 {
            return 0.0;
        }
        for v in y.iter_mut() {
            *v /= norm;
        }
        x = y;
    }
    norm
}
