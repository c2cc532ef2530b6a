use super::{dot, Matrix, Tensor};
use crate::error::{invalid, shape_err, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient of ReLU evaluated at `pre`, with the convention `relu'(0) = 0`.
pub fn relu_grad_mask(pre: &Tensor) -> Tensor {
    pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn log_sum_exp(o: &[f64]) -> f64 {
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + o.iter().fold(0.0, |acc, &v| acc + (v - m).exp()).ln()
}

pub fn softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|&v| (v - m).exp()).collect();
    let z = e.iter().sum::<f64>();
    e.into_iter().map(|v| v / z).collect()
}

fn ce_unchecked(logits: &[f64], target: &[f64]) -> f64 {
    log_sum_exp(logits) - dot(target, logits)
}

/// `-sum_i y_i o_i + logsumexp(o)` for a one-hot label.
pub fn softmax_cross_entropy(logits: &[f64], label: &[f64]) -> Result<f64> {
    if logits.len() != label.len() || logits.is_empty() {
        return Err(shape_err(format!(
            "{} logits vs {} label entries",
            logits.len(),
            label.len()
        )));
    }
    let ones = label.iter().filter(|&&v| v == 1.0).count();
    let zeros = label.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != label.len() {
        return Err(invalid("label is not one-hot"));
    }
    Ok(ce_unchecked(logits, label))
}

/// Cross entropy against an arbitrary probability vector (mixup labels).
pub fn cross_entropy_soft(logits: &[f64], probs: &[f64]) -> Result<f64> {
    if logits.len() != probs.len() || logits.is_empty() {
        return Err(shape_err(format!(
            "{} logits vs {} target entries",
            logits.len(),
            probs.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
        return Err(invalid("target is not a probability vector"));
    }
    Ok(ce_unchecked(logits, probs))
}

const POWER_MAX_ITERS: usize = 1000;
const POWER_REL_TOL: f64 = 1e-10;

/// Spectral norm by power iteration on `A^T A`.
///
/// Starts from the normalized all-ones vector. If that start lies in the null
/// space, restarts from the basis vector of the column with the largest norm.
pub fn operator_norm(a: &Matrix) -> f64 {
    if a.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let n = a.cols();
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    if let Some(s) = power_iterate(a, ones) {
        return s;
    }
    let best_col = (0..n)
        .map(|j| (j, (0..a.rows()).map(|i| a.get(i, j).powi(2)).sum::<f64>()))
        .fold(
            (0, -1.0),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        )
        .0;
    let mut e = vec![0.0; n];
    e[best_col] = 1.0;
    power_iterate(a, e).unwrap_or(0.0)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn power_iterate(a: &Matrix, mut v: Vec<f64>) -> Option<f64> {
    let scale = a.data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let mut av = a.matvec(&v);
    let mut sigma = dot(&av, &av).sqrt();
    if sigma <= 1e-14 * scale {
        return None;
    }
    for _ in 0..POWER_MAX_ITERS {
        v = a.matvec_t(&av);
        if normalize(&mut v) == 0.0 {
            break;
        }
        av = a.matvec(&v);
        let next = dot(&av, &av).sqrt();
        let converged = (next - sigma).abs() <= POWER_REL_TOL * next;
        sigma = next;
        if converged {
            break;
        }
    }
    Some(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::new([1, 1, 1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        assert_eq!(relu_grad_mask(&x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = softmax_cross_entropy(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = softmax_cross_entropy(&[1000.0, -1000.0], &[1.0, 0.0]).unwrap();
        assert!(sat.is_finite() && sat.abs() < 1e-12);
        let wrong = softmax_cross_entropy(&[1000.0, -1000.0], &[0.0, 1.0]).unwrap();
        assert!((wrong - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn non_one_hot_label_rejected() {
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[0.5, 0.5]).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(softmax_cross_entropy(&[0.0], &[1.0, 0.0]).is_err());
        assert!(cross_entropy_soft(&[0.0, 0.0], &[0.5, 0.5]).is_ok());
        assert!(cross_entropy_soft(&[0.0, 0.0], &[0.7, 0.5]).is_err());
    }

    #[test]
    fn operator_norm_examples() {
        assert!((operator_norm(&Matrix::identity(3)) - 1.0).abs() < 1e-12);
        assert!((operator_norm(&Matrix::from_diag(&[3.0, 1.0])) - 3.0).abs() < 1e-9);
        assert_eq!(operator_norm(&Matrix::zeros(2, 3)), 0.0);
        // all-ones start is in the null space here
        let m = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        assert!((operator_norm(&m) - 2f64.sqrt()).abs() < 1e-12);
    }
}
