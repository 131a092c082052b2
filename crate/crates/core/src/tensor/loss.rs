use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    (c, c == p)
}

/// Weighted binary cross-entropy averaged by the total weight.
pub fn weighted_pixel_bce(prob: &Tensor, target: &Tensor, weight: &Tensor) -> Result<Tensor> {
    if prob.shape() != target.shape() || prob.shape() != weight.shape() {
        return Err(Error::shape(format!(
            "weighted_pixel_bce: prob {:?}, target {:?}, weight {:?} must match",
            prob.shape(),
            target.shape(),
            weight.shape()
        )));
    }
    let w = weight.data();
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("weight map must be finite and nonnegative"));
    }
    let weight_sum: f64 = w.iter().sum();
    if weight_sum <= 0.0 {
        return Err(Error::invalid("weight map sums to zero"));
    }
    let t = target.data();
    if t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("target must be binary"));
    }
    let p = prob.data();
    let total: f64 = p
        .iter()
        .zip(t.iter())
        .zip(w.iter())
        .map(|((&p, &t), &w)| {
            let (p, _) = clamp_prob(p);
            w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    drop((p, t, w));
    Ok(Tensor::from_op(
        vec![1],
        vec![-total / weight_sum],
        Op::WeightedBce { weight_sum },
        &[prob, target, weight],
    ))
}

pub(super) fn weighted_bce_backward(parents: &[Tensor], weight_sum: f64, g: f64) -> Vec<Option<Vec<f64>>> {
    let (p, t, w) = (parents[0].data(), parents[1].data(), parents[2].data());
    let dp = p
        .iter()
        .zip(t.iter())
        .zip(w.iter())
        .map(|((&p, &t), &w)| {
            let (pc, inside) = clamp_prob(p);
            if !inside {
                return 0.0;
            }
            -g * w * (t / pc - (1.0 - t) / (1.0 - pc)) / weight_sum
        })
        .collect();
    vec![Some(dp), None, None]
}

/// Mean negative log-likelihood of the labelled class for `probs[N,K]`.
pub fn class_cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!(
            "class_cross_entropy: probs {s:?} vs {} labels",
            labels.len()
        )));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let p = probs.data();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -clamp_prob(p[i * k + l]).0.ln())
        .sum();
    drop(p);
    Ok(Tensor::from_op(
        vec![1],
        vec![total / labels.len() as f64],
        Op::ClassCrossEntropy { labels: labels.to_vec() },
        &[probs],
    ))
}

pub(super) fn class_ce_backward(parents: &[Tensor], labels: &[usize], g: f64) -> Vec<Option<Vec<f64>>> {
    let probs = &parents[0];
    let k = probs.shape()[1];
    let p = probs.data();
    let n = labels.len() as f64;
    let mut dp = vec![0.0; p.len()];
    for (i, &l) in labels.iter().enumerate() {
        let (pc, inside) = clamp_prob(p[i * k + l]);
        if inside {
            dp[i * k + l] = -g / (n * pc);
        }
    }
    vec![Some(dp)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn bce_perfect_prediction() {
        let target = t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let w = t(&[1, 1, 2, 2], vec![1.0, 2.0, 0.5, 1.0]);
        let loss = weighted_pixel_bce(&target, &target, &w).unwrap().item();
        assert!(loss <= 1e-6, "{loss}");
    }

    #[test]
    fn bce_half_probability_is_ln2() {
        let p = t(&[1, 1, 2, 2], vec![0.5; 4]);
        let target = t(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let w = t(&[1, 1, 2, 2], vec![0.3, 2.0, 5.0, 0.0]);
        let loss = weighted_pixel_bce(&p, &target, &w).unwrap().item();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_zero_weights_and_mismatch() {
        let p = t(&[1, 1, 1, 2], vec![0.5; 2]);
        let target = t(&[1, 1, 1, 2], vec![1.0, 0.0]);
        let zero = t(&[1, 1, 1, 2], vec![0.0; 2]);
        assert!(matches!(weighted_pixel_bce(&p, &target, &zero), Err(Error::InvalidArgument(_))));
        let other = t(&[1, 1, 2, 1], vec![1.0; 2]);
        assert!(matches!(weighted_pixel_bce(&p, &target, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn ce_values() {
        let onehot = t(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(class_cross_entropy(&onehot, &[1, 2]).unwrap().item() <= 1e-6);
        let uniform = t(&[2, 3], vec![1.0 / 3.0; 6]);
        let l = class_cross_entropy(&uniform, &[0, 2]).unwrap().item();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(class_cross_entropy(&uniform, &[0, 3]).is_err());
    }
}
