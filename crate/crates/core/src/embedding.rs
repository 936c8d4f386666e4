//! Unified hashed embeddings.
//!
//! Every categorical feature shares one `rows x dim` table. A raw value is
//! mapped to `n_lookups` rows by seeded 64-bit hashing of its bytes; the
//! looked-up rows are summed. Hashing depends only on `(feature, raw value,
//! seed)`, so indices are identical across processes and unseen values
//! embed without a vocabulary.

use serde::{Deserialize, Serialize};

use crate::autograd::splitmix64;
use crate::data::{Feedback, Interaction, Sym, Vocab, NUM_FACTORS};

/// Seeded hash of a byte string: SplitMix64 absorbed over 8-byte words.
pub fn hash_bytes(bytes: &[u8], seed: u64) -> u64 {
    let mut h = splitmix64(seed ^ (bytes.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = splitmix64(h ^ u64::from_le_bytes(word));
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedEmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub seed: u64,
}

impl UnifiedEmbeddingTable {
    fn lookup_seed(&self, feature: &str, lookup: usize) -> u64 {
        splitmix64(hash_bytes(feature.as_bytes(), self.seed) ^ splitmix64(lookup as u64))
    }

    /// Row index of lookup `lookup` for `raw` under `feature`.
    pub fn row(&self, feature: &str, raw: &str, lookup: usize) -> usize {
        (hash_bytes(raw.as_bytes(), self.lookup_seed(feature, lookup)) % self.rows as u64) as usize
    }

    pub fn rows_for(&self, feature: &str, raw: &str, n_lookups: usize) -> Vec<usize> {
        (0..n_lookups).map(|l| self.row(feature, raw, l)).collect()
    }
}

pub const ITEM_FEATURE: &str = "item_id";
pub const SURFACE_FEATURE: &str = "surface";
pub const DEVICE_FEATURE: &str = "device";
pub const FEEDBACK_FEATURES: [&str; NUM_FACTORS] = ["like", "skip", "listen_bucket"];

/// Precomputed table rows for every symbol of a vocabulary.
#[derive(Clone, Debug)]
pub struct HashedVocab {
    pub item_lookups: usize,
    item: Vec<usize>,
    surface: Vec<usize>,
    device: Vec<usize>,
    feedback: [Vec<usize>; NUM_FACTORS],
}

impl HashedVocab {
    pub fn new(table: &UnifiedEmbeddingTable, vocab: &Vocab, item_lookups: usize) -> Self {
        let mut item = Vec::with_capacity(vocab.len() * item_lookups);
        let mut surface = Vec::with_capacity(vocab.len());
        let mut device = Vec::with_capacity(vocab.len());
        for id in 0..vocab.len() as Sym {
            let name = vocab.name(id);
            item.extend(table.rows_for(ITEM_FEATURE, name, item_lookups));
            surface.push(table.row(SURFACE_FEATURE, name, 0));
            device.push(table.row(DEVICE_FEATURE, name, 0));
        }
        let feedback = std::array::from_fn(|k| {
            (0..crate::data::FACTOR_CLASSES[k]).map(|c| table.row(FEEDBACK_FEATURES[k], &c.to_string(), 0)).collect()
        });
        Self { item_lookups, item, surface, device, feedback }
    }

    pub fn item_rows(&self, item: Sym) -> &[usize] {
        let n = self.item_lookups;
        &self.item[item as usize * n..(item as usize + 1) * n]
    }

    pub fn surface_row(&self, s: Sym) -> usize {
        self.surface[s as usize]
    }

    pub fn device_row(&self, d: Sym) -> usize {
        self.device[d as usize]
    }

    pub fn feedback_rows(&self, f: &Feedback) -> [usize; NUM_FACTORS] {
        let c = f.classes();
        std::array::from_fn(|k| self.feedback[k][c[k]])
    }
}

/// Table rows needed to embed a batch of interactions, one entry per row of
/// the packed batch.
#[derive(Clone, Debug, Default)]
pub struct InteractionRows {
    pub surface: Vec<usize>,
    pub device: Vec<usize>,
    /// `item[l]` holds lookup `l` for every interaction.
    pub item: Vec<Vec<usize>>,
    pub feedback: [Vec<usize>; NUM_FACTORS],
    pub position: Vec<usize>,
}

impl InteractionRows {
    pub fn with_capacity(item_lookups: usize, n: usize) -> Self {
        Self {
            surface: Vec::with_capacity(n),
            device: Vec::with_capacity(n),
            item: (0..item_lookups).map(|_| Vec::with_capacity(n)).collect(),
            feedback: std::array::from_fn(|_| Vec::with_capacity(n)),
            position: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, hv: &HashedVocab, it: &Interaction, position: usize) {
        self.surface.push(hv.surface_row(it.surface));
        self.device.push(hv.device_row(it.device));
        for (l, rows) in self.item.iter_mut().enumerate() {
            rows.push(hv.item_rows(it.item)[l]);
        }
        let fb = hv.feedback_rows(&it.feedback);
        for k in 0..NUM_FACTORS {
            self.feedback[k].push(fb[k]);
        }
        self.position.push(position);
    }

    pub fn len(&self) -> usize {
        self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface.is_empty()
    }
}
