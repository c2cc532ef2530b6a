#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdistill_core::network::{convnet_s, Network, Role};
use xdistill_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn nonneg(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

/// A random conv stack with `depth` convolutions on a small input.
pub fn random_net(depth: usize, seed: u64) -> Network {
    let mut r = rng(seed);
    let c_in = r.random_range(1..=2);
    let side = r.random_range(5..=8);
    let channels: Vec<usize> = (0..depth).map(|_| r.random_range(2..=4)).collect();
    let strides: Vec<usize> = (0..depth).map(|_| r.random_range(1..=2)).collect();
    let classes = r.random_range(2..=5);
    let layers = convnet_s([c_in, side, side], &channels, &strides, 3, classes).unwrap();
    Network::init([c_in, side, side], layers, Role::Teacher, seed).unwrap()
}

/// Same architecture as `net` with every weight perturbed by up to `scale`.
pub fn perturbed(net: &Network, scale: f64, seed: u64) -> Network {
    let mut r = rng(seed);
    let mut out = net.clone();
    for l in 0..net.num_layers() {
        let base = &net.weights()[l];
        let data = base
            .data()
            .iter()
            .map(|v| v + scale * r.random_range(-1.0..1.0))
            .collect();
        out.set_weights(l, Tensor::new(base.shape(), data).unwrap())
            .unwrap();
    }
    out
}

/// `max |a - b| / max(|b|, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

/// Plain loop-nest convolution, zero padding, no bias.
pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, co, oh, ow], |[b, o, y, xx]| {
        let mut acc = 0.0;
        for c in 0..ci {
            for dy in 0..k {
                for dx in 0..k {
                    let iy = (y * stride + dy) as i64 - pad as i64;
                    let ix = (xx * stride + dx) as i64 - pad as i64;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.get([o, c, dy, dx]) * x.get([b, c, iy as usize, ix as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Central differences of `f` with respect to every entry of `w`.
pub fn finite_diff(w: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let mut plus = w.clone();
            plus.data_mut()[i] += step;
            let mut minus = w.clone();
            minus.data_mut()[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Minimizer of a one-dimensional objective on `[lo, hi]`: a coarse grid,
/// then a fine grid around the best coarse point.
pub fn grid_argmin(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let best = |lo: f64, hi: f64, steps: usize| -> f64 {
        (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap()
    };
    let coarse_step = (hi - lo) / 2000.0;
    let x = best(lo, hi, 2000);
    let x = best((x - coarse_step).max(lo), (x + coarse_step).min(hi), 4000);
    let fine_step = 2.0 * coarse_step / 4000.0;
    best((x - fine_step).max(lo), (x + fine_step).min(hi), 400)
}

/// Grid oracle for `argmin_x 0.5 (x - u)^2 + lambda |x|`.
pub fn oracle_prox_l1(u: f64, lambda: f64) -> f64 {
    let r = u.abs() + 1.0;
    grid_argmin(-r, r, |x| 0.5 * (x - u).powi(2) + lambda * x.abs())
}

/// Grid oracle for `argmin_x 0.5 ||x - u||^2 + lambda ||x||`. Any minimizer
/// lies on the ray through `u` (moving onto it lowers both terms), so a 1-D
/// search over the length `t >= 0` suffices.
pub fn oracle_prox_group(u: &[f64], lambda: f64) -> Vec<f64> {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return u.to_vec();
    }
    let t = grid_argmin(0.0, norm + 1.0, |t| 0.5 * (t - norm).powi(2) + lambda * t);
    u.iter().map(|v| v * t / norm).collect()
}

/// Spectral norm of a row-major `rows x cols` matrix by SVD.
pub fn svd_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Mean softmax cross entropy of logits rows against integer labels,
/// computed with the max-shift trick.
pub fn ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}
