use std::collections::HashMap;

use argus_core::sampling::{draw_negatives, item_key, CountMinSketch, Provenance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

fn zipf_stream(rng: &mut ChaCha8Rng, n: usize, keys: usize) -> Vec<u64> {
    let z = Zipf::new(keys as f64, 1.1).unwrap();
    (0..n).map(|_| item_key(&format!("item-{}", z.sample(rng) as u64))).collect()
}

fn exact_counts(stream: &[u64]) -> HashMap<u64, u64> {
    let mut m = HashMap::new();
    for &k in stream {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

#[test]
fn sketch_never_underestimates_zipf_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0;
    let mut worst_mean_over = 0.0f64;
    for s in 0..100 {
        let stream = zipf_stream(&mut rng, 10_000, 50);
        let mut sketch = CountMinSketch::new(4, 1024, s).unwrap();
        for &k in &stream {
            sketch.insert(k);
        }
        let exact = exact_counts(&stream);
        let mut over = 0u64;
        for (&k, &c) in &exact {
            let e = sketch.estimate(k);
            if e < c {
                violations += 1;
            }
            over += e.saturating_sub(c);
        }
        worst_mean_over = worst_mean_over.max(over as f64 / exact.len() as f64 / stream.len() as f64);
        assert_eq!(sketch.total(), stream.len() as u64);
    }
    assert_eq!(violations, 0);
    assert!(worst_mean_over <= 0.01, "{worst_mean_over}");
}

#[test]
fn log_q_within_overestimate_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stream = zipf_stream(&mut rng, 10_000, 50);
    let (depth, width) = (4, 1024);
    let mut sketch = CountMinSketch::new(depth, width, 9).unwrap();
    for &k in &stream {
        sketch.insert(k);
    }
    let n = stream.len() as f64;
    // standard count-min bound: overestimate <= e N / W (w.h.p. over rows)
    let slack = std::f64::consts::E * n / width as f64;
    for (&k, &c) in &exact_counts(&stream) {
        let lq = sketch.log_q(k).unwrap();
        let lo = (c as f64 / n).ln();
        let hi = ((c as f64 + slack) / n).ln();
        assert!(lq >= lo - 1e-12 && lq <= hi + 1e-12, "{lq} not in [{lo}, {hi}]");
        assert!(lq <= 0.0);
    }
}

#[test]
fn empty_sketch_log_q_errors() {
    let s = CountMinSketch::new(2, 8, 0).unwrap();
    assert!(s.log_q(1).is_err());
    assert_eq!(s.estimate(123), 0);
    assert!(CountMinSketch::new(0, 8, 0).is_err());
}

#[test]
fn every_insert_touches_one_counter_per_row() {
    let mut s = CountMinSketch::new(3, 16, 4).unwrap();
    for k in 0..40u64 {
        s.insert(k * 7919);
        let sum: u64 = s.counters().iter().sum();
        assert_eq!(sum, 3 * (k + 1));
        for row in s.counters().chunks(16) {
            assert_eq!(row.iter().sum::<u64>(), k + 1);
        }
    }
}

fn sketch_for(positives: &[u32]) -> CountMinSketch {
    let mut s = CountMinSketch::new(4, 256, 3).unwrap();
    for &p in positives {
        s.insert(u64::from(p));
    }
    s
}

#[test]
fn uniform_log_q_is_exact() {
    let catalog: Vec<u32> = (0..10).collect();
    let positives = [1u32, 2];
    let sketch = sketch_for(&positives);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = draw_negatives(&positives, &catalog, 5, 0, &sketch, u64::from, &mut rng).unwrap();
    assert_eq!(b.len(), 5);
    assert!(b.log_q.iter().all(|&q| q == 0.1f64.ln()));
    assert!(b.provenance.iter().all(|&p| p == Provenance::Uniform));
    assert!(b.source.iter().all(Option::is_none));
}

#[test]
fn identical_positives_give_identical_inbatch_negatives() {
    let positives = [4u32; 6];
    let sketch = sketch_for(&positives);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = draw_negatives(&positives, &[0, 1, 2, 3, 4], 0, 10, &sketch, u64::from, &mut rng).unwrap();
    assert_eq!(b.len(), 10);
    assert!(b.items.iter().all(|&i| i == 4));
    assert!(b.log_q.iter().all(|&q| q == 0.0));
}

#[test]
fn preconditions() {
    let sketch = sketch_for(&[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(draw_negatives(&[1], &[], 1, 0, &sketch, u64::from, &mut rng).is_err());
    assert!(draw_negatives(&[], &[1], 0, 1, &sketch, u64::from, &mut rng).is_err());
}

#[test]
fn inbatch_frequency_matches_positive_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = Zipf::new(20.0, 1.0).unwrap();
    let positives: Vec<u32> = (0..50).map(|_| z.sample(&mut rng) as u32).collect();
    let sketch = sketch_for(&positives);
    let per_draw = 10;
    let rounds = 10_000;
    let mut observed: HashMap<u32, f64> = HashMap::new();
    for _ in 0..rounds {
        let b = draw_negatives(&positives, &[0], 0, per_draw, &sketch, u64::from, &mut rng).unwrap();
        for &i in &b.items {
            *observed.entry(i).or_default() += 1.0;
        }
    }
    let n = (per_draw * rounds) as f64;
    let expected = exact_counts(&positives.iter().map(|&p| u64::from(p)).collect::<Vec<_>>());
    for (&item, &c) in &expected {
        let p = c as f64 / positives.len() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        let o = observed.get(&(item as u32)).copied().unwrap_or(0.0);
        assert!((o - n * p).abs() <= 3.0 * sigma, "item {item}: {o} vs {}", n * p);
    }
    assert_eq!(observed.len(), expected.len());
}

#[test]
fn draws_are_deterministic_under_seed() {
    let positives: Vec<u32> = (0..30).map(|i| i % 7).collect();
    let sketch = sketch_for(&positives);
    let catalog: Vec<u32> = (0..100).collect();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        draw_negatives(&positives, &catalog, 16, 16, &sketch, u64::from, &mut rng).unwrap()
    };
    assert_eq!(draw(5).items, draw(5).items);
    assert_ne!(draw(5).items, draw(6).items);
}

proptest! {
    #[test]
    fn sketch_dominates_exact_counter(
        stream in prop::collection::vec(0u64..200, 0..2000),
        depth in 1usize..5,
        width in 1usize..64,
        seed in any::<u64>(),
    ) {
        let mut s = CountMinSketch::new(depth, width, seed).unwrap();
        for &k in &stream {
            s.insert(k);
        }
        for (&k, &c) in &exact_counts(&stream) {
            prop_assert!(s.estimate(k) >= c);
        }
    }

    #[test]
    fn no_query_sees_its_own_position(
        n_pos in 1usize..40,
        n_inbatch in 0usize..80,
        n_uniform in 0usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positives: Vec<u32> = (0..n_pos).map(|_| rng.random_range(0..5)).collect();
        let sketch = sketch_for(&positives);
        let b = draw_negatives(&positives, &[0, 1, 2, 3, 4], n_uniform, n_inbatch, &sketch, u64::from, &mut rng).unwrap();
        prop_assert_eq!(b.len(), n_uniform + n_inbatch);
        prop_assert!(b.log_q.iter().all(|q| q.is_finite() && *q <= 0.0));
        let mask = b.self_mask(n_pos);
        let m = b.len();
        for q in 0..n_pos {
            for j in 0..m {
                // masked exactly where the negative was copied from the query's own position
                prop_assert_eq!(mask[q * m + j], b.source[j] == Some(q));
                if let Some(s) = b.source[j] {
                    prop_assert_eq!(b.items[j], positives[s]);
                }
            }
        }
    }
}
