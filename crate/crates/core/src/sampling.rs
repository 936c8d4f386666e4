//! Count-min frequency sketch and mixed negative sampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::splitmix64;
use crate::data::Sym;
use crate::embedding::hash_bytes;
use crate::error::{ArgusError, Result};

const MERSENNE_61: u64 = (1 << 61) - 1;

fn mod_mersenne(x: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let y = (x & p) + (x >> 61);
    let y = (y & p) + (y >> 61);
    (if y >= p { y - p } else { y }) as u64
}

/// Stable sketch key for an item id.
pub fn item_key(item_id: &str) -> u64 {
    hash_bytes(item_id.as_bytes(), 0x1f2e_3d4c_5b6a_7988)
}

/// `depth x width` counters; row `r` hashes with `(a_r·x + b_r) mod p mod width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMinSketch {
    depth: usize,
    width: usize,
    seeds: Vec<(u64, u64)>,
    counters: Vec<u64>,
    total: u64,
}

impl CountMinSketch {
    pub fn new(depth: usize, width: usize, seed: u64) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(ArgusError::Config(format!("sketch dimensions {depth}x{width} must be positive")));
        }
        let mut s = splitmix64(seed);
        let seeds = (0..depth)
            .map(|_| {
                s = splitmix64(s);
                let a = 1 + s % (MERSENNE_61 - 1);
                s = splitmix64(s);
                (a, s % MERSENNE_61)
            })
            .collect();
        Ok(Self { depth, width, seeds, counters: vec![0; depth * width], total: 0 })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    fn slot(&self, row: usize, key: u64) -> usize {
        let (a, b) = self.seeds[row];
        let x = key % MERSENNE_61;
        let h = mod_mersenne(a as u128 * x as u128 + b as u128);
        row * self.width + (h % self.width as u64) as usize
    }

    pub fn insert(&mut self, key: u64) {
        for r in 0..self.depth {
            let i = self.slot(r, key);
            self.counters[i] += 1;
        }
        self.total += 1;
    }

    pub fn estimate(&self, key: u64) -> u64 {
        (0..self.depth).map(|r| self.counters[self.slot(r, key)]).min().unwrap_or(0)
    }

    /// `log(max(estimate, 1) / total)`.
    pub fn log_q(&self, key: u64) -> Result<f64> {
        if self.total == 0 {
            return Err(ArgusError::EmptySketch);
        }
        Ok((self.estimate(key).max(1) as f64 / self.total as f64).ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Uniform,
    InBatch,
}

#[derive(Clone, Debug, Default)]
pub struct NegativeBatch {
    pub items: Vec<Sym>,
    pub log_q: Vec<f64>,
    pub provenance: Vec<Provenance>,
    /// For in-batch negatives, the position of the positive they were
    /// copied from.
    pub source: Vec<Option<usize>>,
}

impl NegativeBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Row-major `n_queries x len` mask; true where negative `j` is the
    /// query's own positive.
    pub fn self_mask(&self, n_queries: usize) -> Vec<bool> {
        let m = self.len();
        let mut mask = vec![false; n_queries * m];
        for (j, s) in self.source.iter().enumerate() {
            if let Some(q) = *s {
                if q < n_queries {
                    mask[q * m + j] = true;
                }
            }
        }
        mask
    }
}

/// Mixed negatives: `n_uniform` i.i.d. catalog draws with exact
/// `log(1/|catalog|)` and `n_inbatch` copies of other positions' positives
/// with sketch-estimated `logQ`. `key` maps an item to its sketch key.
pub fn draw_negatives(
    positives: &[Sym],
    catalog: &[Sym],
    n_uniform: usize,
    n_inbatch: usize,
    sketch: &CountMinSketch,
    key: impl Fn(Sym) -> u64,
    rng: &mut impl Rng,
) -> Result<NegativeBatch> {
    if catalog.is_empty() && n_uniform > 0 {
        return Err(ArgusError::Empty("catalog".into()));
    }
    if positives.is_empty() && n_inbatch > 0 {
        return Err(ArgusError::Empty("batch has no positives for in-batch negatives".into()));
    }
    let mut out = NegativeBatch::default();
    let uniform_lq = (1.0 / catalog.len() as f64).ln();
    for _ in 0..n_uniform {
        out.items.push(catalog[rng.random_range(0..catalog.len())]);
        out.log_q.push(uniform_lq);
        out.provenance.push(Provenance::Uniform);
        out.source.push(None);
    }
    let picks: Vec<usize> = if n_inbatch > positives.len() {
        (0..n_inbatch).map(|_| rng.random_range(0..positives.len())).collect()
    } else {
        index::sample(rng, positives.len(), n_inbatch).into_vec()
    };
    for p in picks {
        let item = positives[p];
        out.items.push(item);
        out.log_q.push(sketch.log_q(key(item))?);
        out.provenance.push(Provenance::InBatch);
        out.source.push(Some(p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_counts_exactly() {
        let mut s = CountMinSketch::new(4, 64, 1).unwrap();
        assert_eq!(s.estimate(7), 0);
        for _ in 0..5 {
            s.insert(7);
        }
        assert_eq!(s.estimate(7), 5);
        assert_eq!(s.log_q(7).unwrap(), 0.0);
    }

    #[test]
    fn equal_counts_give_half() {
        let mut s = CountMinSketch::new(4, 1024, 2).unwrap();
        s.insert(1);
        s.insert(2);
        assert_eq!((s.estimate(1), s.estimate(2)), (1, 1));
        assert_eq!(s.log_q(1).unwrap(), 0.5f64.ln());
        assert_eq!(s.log_q(2).unwrap(), 0.5f64.ln());
    }

    #[test]
    fn empty_sketch_errors() {
        let s = CountMinSketch::new(2, 8, 0).unwrap();
        assert!(matches!(s.log_q(3), Err(ArgusError::EmptySketch)));
    }

    #[test]
    fn uniform_log_q_is_exact() {
        let s = CountMinSketch::new(2, 8, 0).unwrap();
        let catalog: Vec<Sym> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nb = draw_negatives(&[], &catalog, 5, 0, &s, |x| x as u64, &mut rng).unwrap();
        assert!(nb.log_q.iter().all(|&l| l == 0.1f64.ln()));
    }

    #[test]
    fn identical_positives_give_identical_negatives() {
        let mut s = CountMinSketch::new(2, 8, 0).unwrap();
        let pos = vec![4 as Sym; 6];
        pos.iter().for_each(|&p| s.insert(p as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nb = draw_negatives(&pos, &[1, 2], 0, 10, &s, |x| x as u64, &mut rng).unwrap();
        assert_eq!(nb.len(), 10);
        assert!(nb.items.iter().all(|&i| i == 4));
    }

    #[test]
    fn self_mask_marks_sources() {
        let nb = NegativeBatch {
            items: vec![0, 1, 2],
            log_q: vec![0.0; 3],
            provenance: vec![Provenance::Uniform, Provenance::InBatch, Provenance::InBatch],
            source: vec![None, Some(1), Some(0)],
        };
        assert_eq!(nb.self_mask(2), vec![false, false, true, false, true, false]);
    }
}
