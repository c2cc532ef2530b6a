//! Regularizers, their proximal maps, the sparsity ramp and quantization helpers.
//!
//! Sparsity is driven by a target *level* rather than a raw threshold: at
//! level `s` the threshold is the magnitude quantile that zeroes exactly
//! `ceil(s * n)` elements (or groups), and surviving entries are shrunk by
//! that same threshold.

use log::warn;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Penalty attached to a student layer during distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    /// Elementwise soft threshold at a scheduled sparsity level.
    L1 {
        sparsity: f64,
    },
    /// Output-channel group shrinkage at a scheduled fraction of zero groups.
    Group21 {
        sparsity: f64,
    },
    /// Latent full-precision weights, quantized on every forward evaluation.
    QuantProject {
        bits: u32,
    },
    /// Partial pull toward the nearest quantization point with strength `strength`.
    QuantPenalty {
        bits: u32,
        strength: f64,
    },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::None => Ok(()),
            Regularizer::L1 { sparsity } | Regularizer::Group21 { sparsity } => {
                if (0.0..1.0).contains(&sparsity) {
                    Ok(())
                } else {
                    Err(invalid(format!(
                        "target sparsity {sparsity} outside [0, 1)"
                    )))
                }
            }
            Regularizer::QuantProject { bits } => check_bits(bits),
            Regularizer::QuantPenalty { bits, strength } => {
                check_bits(bits)?;
                if strength >= 0.0 && strength.is_finite() {
                    Ok(())
                } else {
                    Err(invalid(format!("penalty strength {strength} must be >= 0")))
                }
            }
        }
    }

    pub fn target_sparsity(&self) -> f64 {
        match *self {
            Regularizer::L1 { sparsity } | Regularizer::Group21 { sparsity } => sparsity,
            _ => 0.0,
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match *self {
            Regularizer::QuantProject { bits } | Regularizer::QuantPenalty { bits, .. } => {
                Some(bits)
            }
            _ => None,
        }
    }

    /// Same regularizer with a different sparsity target (no-op for other kinds).
    pub fn with_sparsity(self, s: f64) -> Self {
        match self {
            Regularizer::L1 { .. } => Regularizer::L1 { sparsity: s },
            Regularizer::Group21 { .. } => Regularizer::Group21 { sparsity: s },
            other => other,
        }
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(invalid(format!("bit width {bits} outside [2, 16]")))
    }
}

/// Soft threshold: `w - l` above `l`, `0` inside `[-l, l]`, `w + l` below `-l`.
pub fn soft_threshold(w: f64, lambda: f64) -> f64 {
    if w > lambda {
        w - lambda
    } else if w < -lambda {
        w + lambda
    } else {
        0.0
    }
}

pub fn prox_l1(w: &Tensor, lambda: f64) -> Tensor {
    w.map(|v| soft_threshold(v, lambda))
}

/// Group norms over output-channel slices `(c_i, k, k)`.
pub fn group_norms(w: &Tensor) -> Vec<f64> {
    let per = w.sample_len();
    (0..w.n())
        .map(|o| {
            w.data()[o * per..(o + 1) * per]
                .iter()
                .fold(0.0, |acc, &v| acc + v * v)
                .sqrt()
        })
        .collect()
}

fn group_scale(norm: f64, lambda: f64) -> f64 {
    if norm <= lambda || norm == 0.0 {
        0.0
    } else {
        1.0 - lambda / norm
    }
}

/// Group shrinkage `max(1 - l / ||g||, 0) g` per output channel.
pub fn prox_group(w: &Tensor, lambda: f64) -> Tensor {
    let per = w.sample_len();
    let norms = group_norms(w);
    let mut out = w.clone();
    for (o, &n) in norms.iter().enumerate() {
        let s = group_scale(n, lambda);
        out.data_mut()[o * per..(o + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityKind {
    Element,
    Group,
}

/// Number of zeroed units at level `s` out of `n`.
pub fn zero_count(s: f64, n: usize) -> usize {
    ((s * n as f64).ceil() as usize).min(n)
}

/// Indices of the `m` smallest magnitudes; equal magnitudes take the earlier index first.
fn smallest_indices(mags: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| mags[a].total_cmp(&mags[b]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

fn magnitudes(w: &Tensor, kind: SparsityKind) -> Vec<f64> {
    match kind {
        SparsityKind::Element => w.data().iter().map(|v| v.abs()).collect(),
        SparsityKind::Group => group_norms(w),
    }
}

/// Threshold that zeroes exactly `ceil(s * n)` elements (or groups): the
/// largest magnitude among the zeroed set, `0` when nothing is zeroed.
pub fn level_to_lambda(w: &Tensor, s: f64, kind: SparsityKind) -> f64 {
    let mags = magnitudes(w, kind);
    let m = zero_count(s, mags.len());
    if m == 0 {
        return 0.0;
    }
    smallest_indices(&mags, m)
        .into_iter()
        .map(|i| mags[i])
        .fold(0.0, f64::max)
}

/// Proximal step at sparsity level `s`: the `ceil(s * n)` smallest units are
/// zeroed (earlier index first on ties) and survivors are shrunk by the
/// level's threshold. The zero count is exact unless a survivor's magnitude
/// equals the threshold, in which case the shrink zeroes it as well.
pub fn prox_at_level(w: &Tensor, s: f64, kind: SparsityKind) -> Tensor {
    let mags = magnitudes(w, kind);
    let m = zero_count(s, mags.len());
    if m == 0 {
        return w.clone();
    }
    let zeroed = smallest_indices(&mags, m);
    let lambda = zeroed.iter().map(|&i| mags[i]).fold(0.0, f64::max);
    let mut is_zeroed = vec![false; mags.len()];
    zeroed.iter().for_each(|&i| is_zeroed[i] = true);
    let mut out = match kind {
        SparsityKind::Element => prox_l1(w, lambda),
        SparsityKind::Group => prox_group(w, lambda),
    };
    let per = match kind {
        SparsityKind::Element => 1,
        SparsityKind::Group => w.sample_len(),
    };
    for (unit, _) in is_zeroed.iter().enumerate().filter(|(_, z)| **z) {
        out.data_mut()[unit * per..(unit + 1) * per]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    out
}

/// Linear sparsity ramp: `s_t = r * min(t / ramp, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub target: f64,
    pub ramp_iters: usize,
}

impl Schedule {
    pub fn new(target: f64, ramp_iters: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&target) {
            return Err(invalid(format!("target sparsity {target} outside [0, 1)")));
        }
        Ok(Self { target, ramp_iters })
    }

    pub fn value(&self, t: usize) -> f64 {
        if self.ramp_iters == 0 || t >= self.ramp_iters {
            self.target
        } else {
            self.target * (t as f64 / self.ramp_iters as f64)
        }
    }
}

/// `{0} U {+-j / (2^(B-1) - 1) : j = 1 .. 2^(B-1) - 1}`, ascending.
///
/// The set has `2^B - 1` points.
pub fn quant_points(bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    let m = (1i64 << (bits - 1)) - 1;
    Ok((-m..=m).map(|j| j as f64 / m as f64).collect())
}

/// Nearest point of the sorted set `q`; exact midpoints go to the point
/// closer to zero.
pub fn nearest_point(v: f64, q: &[f64]) -> f64 {
    let idx = q.partition_point(|&p| p < v);
    if idx == 0 {
        return q[0];
    }
    if idx == q.len() {
        return q[q.len() - 1];
    }
    let (lo, hi) = (q[idx - 1], q[idx]);
    let (dl, dh) = (v - lo, hi - v);
    if dl < dh {
        lo
    } else if dh < dl {
        hi
    } else if lo.abs() <= hi.abs() {
        lo
    } else {
        hi
    }
}

pub fn project_q(values: &[f64], q: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| nearest_point(v, q)).collect()
}

/// Affine map between weights and the normalized `[0, 1]` range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    /// Three-sigma truncation bounds.
    pub lower: f64,
    pub upper: f64,
    /// Min and max of the truncated values.
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn scale(&self) -> f64 {
        self.max - self.min
    }

    /// Normalized `[0, 1]` value to `[-1, 1]` projection coordinates.
    pub fn to_symmetric(g: f64) -> f64 {
        2.0 * g - 1.0
    }

    pub fn from_symmetric(u: f64) -> f64 {
        0.5 * (u + 1.0)
    }

    pub fn denormalize(&self, g: f64) -> f64 {
        self.min + g * (self.max - self.min)
    }

    pub fn truncate(&self, w: f64) -> f64 {
        w.clamp(self.lower, self.upper)
    }
}

/// Three-sigma truncation followed by min-max scaling to `[0, 1]`.
///
/// A constant input maps to all `0.5`.
pub fn normalize_g(w: &[f64]) -> (Vec<f64>, Normalization) {
    let n = w.len().max(1) as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
    let sd = var.sqrt();
    let (lower, upper) = (mean - 3.0 * sd, mean + 3.0 * sd);
    let truncated: Vec<f64> = w.iter().map(|&v| v.clamp(lower, upper)).collect();
    let min = truncated.iter().copied().fold(f64::INFINITY, f64::min);
    let max = truncated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = Normalization {
        lower,
        upper,
        min,
        max,
    };
    if w.is_empty() || !(max > min) {
        warn!("normalizing a constant weight tensor; mapping every value to 0.5");
        return (vec![0.5; w.len()], norm);
    }
    let scale = max - min;
    (truncated.iter().map(|&v| (v - min) / scale).collect(), norm)
}

/// Truncate, normalize, project onto the `bits`-bit point set and map back to weight units.
pub fn quantize_weights(w: &Tensor, bits: u32) -> Result<Tensor> {
    let q = quant_points(bits)?;
    let (g, norm) = normalize_g(w.data());
    if !(norm.max > norm.min) {
        return Ok(w.clone());
    }
    Ok(Tensor::from_parts(
        w.shape(),
        g.iter()
            .map(|&v| {
                let u = nearest_point(Normalization::to_symmetric(v), &q);
                norm.denormalize(Normalization::from_symmetric(u))
            })
            .collect(),
    ))
}

/// One penalty-mode proximal step: `(w + strength * Q(w)) / (1 + strength)`.
pub fn quant_penalty_step(w: &Tensor, bits: u32, strength: f64) -> Result<Tensor> {
    let target = quantize_weights(w, bits)?;
    w.zip_map(&target, |a, b| (a + strength * b) / (1.0 + strength))
}

/// Clamps activations to `[0, 1]`.
pub fn clip_activations(h: &Tensor) -> Tensor {
    h.map(|v| v.clamp(0.0, 1.0))
}
