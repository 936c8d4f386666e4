//! Loss functions, similarity, impression alignment and pair scoring.
//!
//! Scalar forms here are the reference definitions; the batched graph forms
//! used for training live in [`crate::model`] and are tested against them.

use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};

pub const SCALE_MIN: f64 = 0.01;
pub const SCALE_MAX: f64 = 100.0;

/// Trainable temperature `tau`; the effective divisor is `exp(tau)` clamped
/// to `[0.01, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature(pub f64);

impl Temperature {
    pub fn scale(self) -> f64 {
        self.0.exp().clamp(SCALE_MIN, SCALE_MAX)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// `cos(query, item) / clamp(exp(tau), 0.01, 100)`.
pub fn similarity(query: &[f64], item: &[f64], temperature: Temperature) -> f64 {
    cosine(query, item) / temperature.scale()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log(e^pos / (e^pos + sum_n e^(neg_n - logq_n)))`.
pub fn nip_loss(pos: f64, neg: &[f64], log_q: &[f64]) -> Result<f64> {
    if neg.is_empty() || neg.len() != log_q.len() {
        return Err(ArgusError::Shape(format!("{} negatives with {} logQ values", neg.len(), log_q.len())));
    }
    if !pos.is_finite() {
        return Err(ArgusError::NonFinite(format!("positive score {pos}")));
    }
    for (i, (s, q)) in neg.iter().zip(log_q).enumerate() {
        if !s.is_finite() || !q.is_finite() {
            return Err(ArgusError::NonFinite(format!("negative {i}: score {s}, logQ {q}")));
        }
    }
    let terms = std::iter::once(pos).chain(neg.iter().zip(log_q).map(|(s, q)| s - q));
    Ok(log_sum_exp(terms) - pos)
}

/// Categorical cross-entropy of one logit vector against a class index.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(ArgusError::Feedback(format!("class {class} out of range for {} logits", logits.len())));
    }
    Ok(log_sum_exp(logits.iter().copied()) - logits[class])
}

/// Sum of per-factor cross-entropies.
pub fn fp_loss(logits: &[&[f64]], classes: &[usize]) -> Result<f64> {
    if logits.len() != classes.len() {
        return Err(ArgusError::Feedback(format!("{} heads for {} factors", logits.len(), classes.len())));
    }
    logits.iter().zip(classes).map(|(l, &c)| cross_entropy(l, c)).sum()
}

/// An impression and the user state it may be scored with. `state` is
/// `None` for the initial-state sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignedImpression {
    pub impression: usize,
    pub state: Option<usize>,
    pub latency: i64,
}

/// Matches every impression to the latest state with
/// `state_ts <= impression_ts - latency`. `state_ts` must be sorted.
pub fn align_impressions(state_ts: &[i64], impression_ts: &[i64], latency: i64) -> Vec<AlignedImpression> {
    debug_assert!(state_ts.windows(2).all(|w| w[0] <= w[1]));
    impression_ts
        .iter()
        .enumerate()
        .map(|(i, &ts)| {
            let limit = ts.saturating_sub(latency);
            let n = state_ts.partition_point(|&s| s <= limit);
            AlignedImpression { impression: i, state: n.checked_sub(1), latency }
        })
        .collect()
}

/// Raw dot product.
pub fn two_tower_score(h: &[f64], item: &[f64]) -> Result<f64> {
    if h.len() != item.len() {
        return Err(ArgusError::Shape(format!("state dim {} vs item dim {}", h.len(), item.len())));
    }
    Ok(dot(h, item))
}

/// Stable `log(1 + e^-x)`.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `log(1 + e^-(s_pos - s_neg))`.
pub fn finetune_pair_loss(s_pos: f64, s_neg: f64) -> f64 {
    softplus_neg(s_pos - s_neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn similarity_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!((similarity(&v, &v, Temperature(0.0)) - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0], Temperature(1.7)), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 3.0], Temperature(0.0)), 0.0);
        assert_eq!(Temperature(10.0).scale(), 100.0);
        assert_eq!(Temperature(-10.0).scale(), 0.01);
    }

    #[test]
    fn nip_closed_forms() {
        assert!((nip_loss(0.3, &[0.3], &[0.0]).unwrap() - LN2).abs() < 1e-12);
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((nip_loss(2.0, &[0.0], &[0.0]).unwrap() - want).abs() < 1e-12);
        assert!(nip_loss(f64::NAN, &[0.0], &[0.0]).is_err());
        assert!(nip_loss(0.0, &[], &[]).is_err());
    }

    #[test]
    fn fp_uniform_logits() {
        let z2 = [0.0; 2];
        let z4 = [0.0; 4];
        let l = fp_loss(&[&z2, &z2, &z4], &[1, 0, 3]).unwrap();
        assert!((l - (LN2 + LN2 + 4f64.ln())).abs() < 1e-12);
        assert!(fp_loss(&[&z2], &[2]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let a = align_impressions(&[10, 20], &[26, 12], 5);
        assert_eq!(a[0].state, Some(1));
        assert_eq!(a[1].state, None);
    }

    #[test]
    fn pair_loss_values() {
        assert!((finetune_pair_loss(0.7, 0.7) - LN2).abs() < 1e-15);
        assert!((finetune_pair_loss(2.5, 0.5) - 0.126_928_011_042_972_6).abs() < 1e-12);
        assert!(finetune_pair_loss(800.0, 0.0) >= 0.0);
        assert!((finetune_pair_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn two_tower_dims() {
        assert!(two_tower_score(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(two_tower_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }
}
