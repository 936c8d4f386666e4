use argus_core::autograd::Graph;
use argus_core::objectives::{
    align_impressions, cosine, finetune_pair_loss, fp_loss, nip_loss, similarity, two_tower_score, Temperature,
};
use argus_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn nip_closed_forms() {
    assert!((nip_loss(0.0, &[0.0], &[0.0]).unwrap() - LN2).abs() < 1e-9);
    let expected = (1.0 + (-2.0f64).exp()).ln();
    assert!((nip_loss(2.0, &[0.0], &[0.0]).unwrap() - expected).abs() < 1e-9);
    assert!((expected - 0.1269).abs() < 1e-4);
}

#[test]
fn pair_loss_closed_forms() {
    assert!((finetune_pair_loss(1.0, 1.0) - LN2).abs() < 1e-9);
    assert!((finetune_pair_loss(2.0, 0.0) - 0.126_928_011_042_972_6).abs() < 1e-9);
    // large margins stay finite and accurate
    assert!(finetune_pair_loss(800.0, 0.0) >= 0.0);
    assert!((finetune_pair_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
}

#[test]
fn fp_uniform_logits() {
    let l2 = [0.3, 0.3];
    let l4 = [-1.0, -1.0, -1.0, -1.0];
    let v = fp_loss(&[&l2, &l2, &l4], &[1, 0, 3]).unwrap();
    assert!((v - (LN2 + LN2 + 4f64.ln())).abs() < 1e-9);
    assert!((v - 2.7726).abs() < 1e-4);
}

#[test]
fn nip_rejects_bad_input() {
    assert!(nip_loss(0.0, &[], &[]).is_err());
    assert!(nip_loss(0.0, &[1.0], &[0.0, 0.0]).is_err());
    assert!(nip_loss(f64::NAN, &[1.0], &[0.0]).is_err());
    assert!(nip_loss(0.0, &[1.0], &[f64::NEG_INFINITY]).is_err());
}

#[test]
fn similarity_cases() {
    let v = [0.3, -1.2, 2.0];
    assert!((similarity(&v, &v, Temperature(0.0)) - 1.0).abs() < 1e-12);
    assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0], Temperature(-2.0)), 0.0);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    // clamp: e^tau beyond 100 behaves like 100
    assert!((similarity(&v, &v, Temperature(10.0)) - 0.01).abs() < 1e-12);
    assert!((similarity(&v, &v, Temperature(-10.0)) - 100.0).abs() < 1e-9);
}

#[test]
fn two_tower_is_raw_dot() {
    assert_eq!(two_tower_score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
    assert!(two_tower_score(&[1.0], &[1.0, 2.0]).is_err());
}

fn brute_force_alignment(states: &[i64], ts: i64, latency: i64) -> Option<usize> {
    let mut best = None;
    for (j, &s) in states.iter().enumerate() {
        if s + latency <= ts {
            best = Some(j);
        }
    }
    best
}

#[test]
fn alignment_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..40);
        let mut states: Vec<i64> = (0..n).map(|_| rng.random_range(0..10_000)).collect();
        states.sort_unstable();
        let imps: Vec<i64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(-100..12_000)).collect();
        let latency = rng.random_range(0..3_000);
        for a in align_impressions(&states, &imps, latency) {
            if a.state != brute_force_alignment(&states, imps[a.impression], latency) {
                mismatches += 1;
            }
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn alignment_zero_latency_allows_same_timestamp() {
    let a = align_impressions(&[10, 20, 30], &[20, 5, 31], 0);
    assert_eq!(a.iter().map(|x| x.state).collect::<Vec<_>>(), vec![Some(1), None, Some(2)]);
    let b = align_impressions(&[10, 20, 30], &[20], 1);
    assert_eq!(b[0].state, Some(0));
}

/// Derivative of a scalar function of the positive logit, read off the tape.
fn d_positive<Fb>(n: usize, logits: &[f64], build: Fb) -> f64
where
    Fb: Fn(&mut Graph<'_, f64>, argus_core::Var) -> argus_core::Var,
{
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[1, n], logits).unwrap());
    let y = build(&mut g, x);
    g.backward(y).wrt(x).unwrap().data()[0]
}

#[test]
fn sampled_gradient_sign_agrees_with_full_softmax() {
    // catalog of 8 items; item 0 is the positive; the negatives are the full
    // catalog with exact uniform logQ = ln(1/8)
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lq = (1.0f64 / 8.0).ln();
    for _ in 0..100 {
        let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let full = d_positive(8, &scores, |g, x| {
            let ce = g.cross_entropy(x, &[0]).unwrap();
            g.sum(ce)
        });
        // sampled: [pos, neg_0 - lq, ..., neg_7 - lq]
        let mut sampled_logits = vec![scores[0]];
        sampled_logits.extend(scores.iter().map(|s| s - lq));
        let sampled = {
            let mut g = Graph::<f64>::new();
            let pos = g.leaf(Tensor::from_f64(&[1, 1], &scores[..1]).unwrap());
            let rest = g.constant(Tensor::from_f64(&[1, 8], &sampled_logits[1..]).unwrap());
            let logits = g.concat_cols(&[pos, rest]).unwrap();
            let ce = g.cross_entropy(logits, &[0]).unwrap();
            let y = g.sum(ce);
            g.backward(y).wrt(pos).unwrap().data()[0]
        };
        let direct = nip_loss(scores[0], &scores, &[lq; 8]).unwrap();
        let graph: f64 = {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64(&[1, 9], &sampled_logits).unwrap());
            let ce = g.cross_entropy(x, &[0]).unwrap();
            g.value(ce).item()
        };
        assert!((direct - graph).abs() < 1e-9);
        assert_eq!(full.signum(), sampled.signum());
    }
}

proptest! {
    #[test]
    fn nip_is_decreasing_in_each_log_q(
        pos in -5.0f64..5.0,
        neg in prop::collection::vec(-5.0f64..5.0, 1..8),
        idx in 0usize..8,
        delta in 0.01f64..3.0,
    ) {
        let lq: Vec<f64> = neg.iter().map(|_| -2.0).collect();
        let i = idx % neg.len();
        let base = nip_loss(pos, &neg, &lq).unwrap();
        let mut shifted = lq.clone();
        shifted[i] += delta;
        prop_assert!(nip_loss(pos, &neg, &shifted).unwrap() < base);
    }

    #[test]
    fn pair_loss_antisymmetry(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        // softplus(-x) - softplus(x) = -x
        let d = finetune_pair_loss(a, b) - finetune_pair_loss(b, a);
        prop_assert!((d + (a - b)).abs() < 1e-9);
        prop_assert!(finetune_pair_loss(a, b) > 0.0);
    }

    #[test]
    fn nip_is_non_negative(pos in -5.0f64..5.0, neg in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let lq = vec![0.0; neg.len()];
        prop_assert!(nip_loss(pos, &neg, &lq).unwrap() > 0.0);
    }
}
