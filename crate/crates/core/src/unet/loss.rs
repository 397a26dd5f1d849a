use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor4};
use crate::distance_codec::SignedDistMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mae,
    WeightedCrossEntropy,
}

/// Class index of every pixel of a distance map: 0 cell, 1 gutta, 2 other.
pub fn class_labels(map: &SignedDistMap) -> Vec<u8> {
    map.values()
        .iter()
        .map(|&v| if v > 0.0 { 0 } else if v < 0.0 { 1 } else { 2 })
        .collect()
}

/// Inverse pixel-frequency weights renormalized to mean 1 over the classes
/// that occur; absent classes get weight 0.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a [u8]>) -> [f64; 3] {
    let mut counts = [0u64; 3];
    for set in labels {
        for &l in set {
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut w = [0.0; 3];
    if total == 0 {
        return [1.0; 3];
    }
    for (wi, &c) in w.iter_mut().zip(&counts) {
        if c > 0 {
            *wi = total as f64 / c as f64;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mean = w.iter().sum::<f64>() / present;
    w.map(|v| v / mean)
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn mae<S: Scalar>(pred: &Tensor4<S>, target: &[S]) -> (S, Tensor4<S>) {
    let n = S::of(pred.values().len() as f64);
    let mut total = S::zero();
    let grad = pred
        .values()
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            total += d.abs();
            if d > S::zero() {
                n.recip()
            } else if d < S::zero() {
                -n.recip()
            } else {
                S::zero()
            }
        })
        .collect();
    (total / n, pred.with_values(grad))
}

/// Weighted categorical cross-entropy on raw logits, averaged over pixels,
/// and its gradient with respect to the logits.
pub fn weighted_cross_entropy<S: Scalar>(logits: &Tensor4<S>, labels: &[u8], weights: [S; 3]) -> (S, Tensor4<S>) {
    let [batch, c, h, w] = logits.dims();
    debug_assert_eq!(c, 3);
    let plane = h * w;
    let n = S::of((batch * plane) as f64);
    let mut grad = logits.clone();
    let mut total = S::zero();
    for b in 0..batch {
        let s = grad.sample_mut(b);
        for p in 0..plane {
            let max = (0..c).map(|ch| s[ch * plane + p]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for ch in 0..c {
                z += (s[ch * plane + p] - max).exp();
            }
            let t = labels[b * plane + p] as usize;
            let wt = weights[t];
            total -= wt * (s[t * plane + p] - max - z.ln());
            for ch in 0..c {
                let prob = (s[ch * plane + p] - max).exp() / z;
                let onehot = if ch == t { S::one() } else { S::zero() };
                s[ch * plane + p] = wt * (prob - onehot) / n;
            }
        }
    }
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_mean_one() {
        let a = [0u8, 0, 0, 1, 2, 2];
        let w = class_weights([&a[..]]);
        assert!(((w[0] + w[1] + w[2]) / 3.0 - 1.0).abs() < 1e-12);
        assert!(w[1] > w[2] && w[2] > w[0]);
        let only = [0u8, 0, 2];
        let w = class_weights([&only[..]]);
        assert_eq!(w[1], 0.0);
        assert!(((w[0] + w[2]) / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mae_zero_at_target() {
        let p = Tensor4::from_vec(1, 1, 2, 2, vec![1.0f64, -2.0, 0.5, 3.0]).unwrap();
        let (l, g) = mae(&p, p.values());
        assert_eq!(l, 0.0);
        assert!(g.values().iter().all(|&v| v == 0.0));
        let (l, _) = mae(&p, &[0.0; 4]);
        assert!((l - 1.625).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_difference() {
        let logits = Tensor4::from_vec(1, 3, 1, 2, vec![0.3f64, -1.0, 2.0, 0.1, -0.5, 0.7]).unwrap();
        let labels = [2u8, 0];
        let w = [1.2, 0.5, 1.3];
        let (_, g) = weighted_cross_entropy(&logits, &labels, w);
        for i in 0..6 {
            let mut hi = logits.clone();
            hi.values_mut()[i] += 1e-6;
            let mut lo = logits.clone();
            lo.values_mut()[i] -= 1e-6;
            let num = (weighted_cross_entropy(&hi, &labels, w).0 - weighted_cross_entropy(&lo, &labels, w).0) / 2e-6;
            assert!((num - g.values()[i]).abs() < 1e-8);
        }
    }
}
