//! Parameter layout and batched forward passes.
//!
//! Chunks are packed row-wise into one matrix; each chunk is a causal
//! segment of the encoder. Row `r` of a segment sees `h_{r-1}` through the
//! merge heads, or the learned `h_init` at the segment start.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{splitmix64, Graph, ParamGroup, ParamId, ParamStore, Segment, Var};
use crate::data::{build_impression_pairs, Chunk, Sym, FACTOR_CLASSES, NUM_FACTORS};
use crate::embedding::{HashedVocab, InteractionRows, UnifiedEmbeddingTable};
use crate::encoder::{dense, normal, Encoder, EncoderConfig};
use crate::error::{ArgusError, Result};
use crate::objectives::{align_impressions, SCALE_MAX, SCALE_MIN};
use crate::sampling::NegativeBatch;
use crate::tensor::{Float, Tensor};

/// Number of `dim`-wide sub-embeddings merged per interaction:
/// surface, device, item and one per feedback factor.
pub const SUB_EMBEDDINGS: usize = 3 + NUM_FACTORS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub table_rows: usize,
    pub dim: usize,
    pub item_lookups: usize,
    pub hash_seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { table_rows: 32_768, dim: 32, item_lookups: 3, hash_seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub embedding: EmbeddingConfig,
    /// Width of the next-item query and item tower; 0 means encoder width.
    pub output_dim: usize,
    pub tau_init: f64,
    pub embedding_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            embedding: EmbeddingConfig::default(),
            output_dim: 0,
            tau_init: (0.1f64).ln(),
            embedding_init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn output_dim(&self) -> usize {
        if self.output_dim == 0 {
            self.encoder.width
        } else {
            self.output_dim
        }
    }

    pub fn table(&self) -> UnifiedEmbeddingTable {
        UnifiedEmbeddingTable {
            rows: self.embedding.table_rows,
            dim: self.embedding.dim,
            seed: self.embedding.hash_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let e = &self.embedding;
        if e.table_rows == 0 || e.dim == 0 || e.item_lookups == 0 {
            return Err(ArgusError::Config("embedding table_rows, dim and item_lookups must be positive".into()));
        }
        Ok(())
    }
}

type Linear = (ParamId, ParamId);

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub table: UnifiedEmbeddingTable,
    pub encoder: Encoder,
    emb_table: ParamId,
    emb_proj: ParamId,
    emb_pos: ParamId,
    h_init: ParamId,
    ctx1: Linear,
    ctx2: Linear,
    item1: Linear,
    item2: Linear,
    feedback: Vec<Linear>,
    tower: ParamId,
    tau: ParamId,
}

/// Per-batch embedding outputs.
pub struct Embedded {
    /// `N x width` encoder input.
    pub x: Var,
    /// `N x 2d` context sub-embeddings (surface, device).
    pub ctx: Var,
    /// `N x d` item sub-embedding.
    pub item: Var,
}

fn linear<F: Float>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    group: ParamGroup,
    fan_in: usize,
    fan_out: usize,
) -> Linear {
    (
        store.add(&format!("{name}.w"), group, dense(rng, fan_in, fan_out)),
        store.add(&format!("{name}.b"), group, Tensor::zeros(&[fan_out])),
    )
}

impl Model {
    /// Builds the parameter layout with a fresh random initialization.
    pub fn new<F: Float>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x1417));
        let mut store = ParamStore::new();
        let (h, d, out) = (config.encoder.width, config.embedding.dim, config.output_dim());
        let bb = ParamGroup::Backbone;
        let emb_table =
            store.add("emb.table", bb, normal(&mut rng, &[config.embedding.table_rows, d], config.embedding_init_std));
        let emb_proj = store.add("emb.proj", bb, dense(&mut rng, SUB_EMBEDDINGS * d, h));
        let emb_pos = store.add("emb.pos", bb, normal(&mut rng, &[config.encoder.max_len, h], 0.02));
        let h_init = store.add("h_init", bb, normal(&mut rng, &[1, h], 0.02));
        let encoder = Encoder::register(&config.encoder, &mut store, &mut rng)?;
        let ctx1 = linear(&mut store, &mut rng, "head.ctx.1", bb, h + 2 * d, h);
        let ctx2 = linear(&mut store, &mut rng, "head.ctx.2", ParamGroup::Head, h, out);
        let item1 = linear(&mut store, &mut rng, "head.item.1", bb, h + 3 * d, h);
        let item2 = linear(&mut store, &mut rng, "head.item.2", ParamGroup::Head, h, h);
        let feedback = FACTOR_CLASSES
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                // zero weights: a fresh model predicts its bias, see `set_feedback_priors`
                let name = format!("head.fb.{k}");
                (
                    store.add(&format!("{name}.w"), ParamGroup::Head, Tensor::zeros(&[h, c])),
                    store.add(&format!("{name}.b"), ParamGroup::Head, Tensor::zeros(&[c])),
                )
            })
            .collect();
        let tower = store.add("tower.w", bb, dense(&mut rng, d, out));
        let tau = store.add("tau", ParamGroup::Head, Tensor::scalar(F::of(config.tau_init)));
        Ok((
            Self {
                config: config.clone(),
                table: config.table(),
                encoder,
                emb_table,
                emb_proj,
                emb_pos,
                h_init,
                ctx1,
                ctx2,
                item1,
                item2,
                feedback,
                tower,
                tau,
            },
            store,
        ))
    }

    pub fn width(&self) -> usize {
        self.config.encoder.width
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn tau_id(&self) -> ParamId {
        self.tau
    }

    pub fn h_init_id(&self) -> ParamId {
        self.h_init
    }

    pub fn table_id(&self) -> ParamId {
        self.emb_table
    }

    fn lin<F: Float>(g: &mut Graph<'_, F>, x: Var, p: Linear) -> Result<Var> {
        let (w, b) = (g.param(p.0), g.param(p.1));
        g.linear(x, w, Some(b))
    }

    /// Sum of an item's hashed rows, one gather per lookup.
    pub fn item_embedding<F: Float>(&self, g: &mut Graph<'_, F>, lookups: &[Vec<usize>]) -> Result<Var> {
        let table = g.param(self.emb_table);
        let mut acc = g.embedding_gather(table, &lookups[0])?;
        for rows in &lookups[1..] {
            let e = g.embedding_gather(table, rows)?;
            acc = g.add(acc, e)?;
        }
        Ok(acc)
    }

    pub fn item_lookups(&self, hv: &HashedVocab, items: &[Sym]) -> Vec<Vec<usize>> {
        (0..hv.item_lookups).map(|l| items.iter().map(|&i| hv.item_rows(i)[l]).collect()).collect()
    }

    /// Merged interaction embeddings plus positional rows.
    pub fn embed<F: Float>(&self, g: &mut Graph<'_, F>, rows: &InteractionRows) -> Result<Embedded> {
        if let Some(&p) = rows.position.iter().max() {
            if p >= self.config.encoder.max_len {
                return Err(ArgusError::Shape(format!("position {p} >= max_len {}", self.config.encoder.max_len)));
            }
        }
        let table = g.param(self.emb_table);
        let surface = g.embedding_gather(table, &rows.surface)?;
        let device = g.embedding_gather(table, &rows.device)?;
        let item = self.item_embedding(g, &rows.item)?;
        let mut parts = vec![surface, device, item];
        for k in 0..NUM_FACTORS {
            parts.push(g.embedding_gather(table, &rows.feedback[k])?);
        }
        let merged = g.concat_cols(&parts)?;
        let proj = g.param(self.emb_proj);
        let x = g.matmul(merged, proj)?;
        let pos_table = g.param(self.emb_pos);
        let pos = g.embedding_gather(pos_table, &rows.position)?;
        let x = g.add(x, pos)?;
        let x = g.dropout(x, self.config.encoder.dropout);
        let ctx = g.concat_cols(&[surface, device])?;
        Ok(Embedded { x, ctx, item })
    }

    /// Rows of `[h; h_init]`: index `h.rows()` selects `h_init`.
    pub fn states<F: Float>(&self, g: &mut Graph<'_, F>, h: Var, idx: &[usize]) -> Result<Var> {
        let init = g.param(self.h_init);
        let ext = g.concat_rows(&[h, init])?;
        g.gather_rows(ext, idx)
    }

    /// Next-item query from `h_{t-1}` and the current context.
    pub fn context_query<F: Float>(&self, g: &mut Graph<'_, F>, h_prev: Var, ctx: Var) -> Result<Var> {
        let z = g.concat_cols(&[h_prev, ctx])?;
        let z = Self::lin(g, z, self.ctx1)?;
        let z = g.gelu(z);
        Self::lin(g, z, self.ctx2)
    }

    /// Item-aware state from `h_{t-1}`, the current context and item.
    pub fn item_query<F: Float>(&self, g: &mut Graph<'_, F>, h_prev: Var, ctx: Var, item: Var) -> Result<Var> {
        let z = g.concat_cols(&[h_prev, ctx, item])?;
        let z = Self::lin(g, z, self.item1)?;
        let z = g.gelu(z);
        Self::lin(g, z, self.item2)
    }

    /// Sets every feedback head's bias to the log of the given class
    /// frequencies, so an untrained model predicts the priors.
    pub fn set_feedback_priors<F: Float>(&self, store: &mut ParamStore<F>, freqs: &[Vec<f64>]) -> Result<()> {
        if freqs.len() != self.feedback.len() {
            return Err(ArgusError::Shape(format!("{} prior vectors for {} heads", freqs.len(), self.feedback.len())));
        }
        for (&(_, b), f) in self.feedback.iter().zip(freqs) {
            let bias = store.value_mut(b);
            if bias.len() != f.len() {
                return Err(ArgusError::Shape(format!("{} priors for {} classes", f.len(), bias.len())));
            }
            for (x, &p) in bias.data_mut().iter_mut().zip(f) {
                *x = F::of(p.max(1e-6).ln());
            }
        }
        Ok(())
    }

    pub fn feedback_logits<F: Float>(&self, g: &mut Graph<'_, F>, h_item: Var) -> Result<Vec<Var>> {
        self.feedback.iter().map(|&p| Self::lin(g, h_item, p)).collect()
    }

    /// Catalog embedding of item sub-embeddings.
    pub fn tower<F: Float>(&self, g: &mut Graph<'_, F>, item: Var) -> Result<Var> {
        let w = g.param(self.tower);
        g.matmul(item, w)
    }

    pub fn tower_for<F: Float>(&self, g: &mut Graph<'_, F>, hv: &HashedVocab, items: &[Sym]) -> Result<Var> {
        let e = self.item_embedding(g, &self.item_lookups(hv, items))?;
        self.tower(g, e)
    }

    /// `1 / clamp(exp(tau))`.
    pub fn inv_temperature<F: Float>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let tau = g.param(self.tau);
        g.inv_clamped_exp(tau, SCALE_MIN, SCALE_MAX)
    }

    /// Per-query corrected sampled-softmax losses.
    ///
    /// `query` and `pos` are `n x out`, `neg` is `m x out`; `mask` is the
    /// row-major `n x m` self-exclusion mask.
    pub fn nip_losses<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        query: Var,
        pos: Var,
        neg: Var,
        log_q: &[f64],
        mask: &[bool],
    ) -> Result<Var> {
        let n = g.value(query).rows();
        let inv_t = self.inv_temperature(g)?;
        let cos_pos = g.cosine_similarity(query, pos)?;
        let f_pos = g.scale_by(cos_pos, inv_t)?;
        let f_pos = g.reshape(f_pos, &[n, 1])?;
        let qn = g.l2_normalize(query);
        let nn = g.l2_normalize(neg);
        let cos_neg = g.matmul_nt(qn, nn)?;
        let f_neg = g.scale_by(cos_neg, inv_t)?;
        let lq = g.constant(Tensor::from_f64(&[log_q.len()], &log_q.iter().map(|q| -q).collect::<Vec<_>>())?);
        let f_neg = g.add_row(f_neg, lq)?;
        let f_neg = g.mask_fill(f_neg, mask)?;
        let logits = g.concat_cols(&[f_pos, f_neg])?;
        g.cross_entropy(logits, &vec![0; n])
    }

    /// Sum over factors of per-row feedback cross-entropy.
    pub fn fp_losses<F: Float>(&self, g: &mut Graph<'_, F>, h_item: Var, classes: &[Vec<usize>]) -> Result<Var> {
        let logits = self.feedback_logits(g, h_item)?;
        let mut acc = g.cross_entropy(logits[0], &classes[0])?;
        for k in 1..logits.len() {
            let ce = g.cross_entropy(logits[k], &classes[k])?;
            acc = g.add(acc, ce)?;
        }
        Ok(acc)
    }

    /// Batched pre-training objective over the target rows of `batch`.
    pub fn pretrain_loss<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &PackedBatch,
        hv: &HashedVocab,
        negatives: &NegativeBatch,
    ) -> Result<PretrainOutput> {
        let heads = self.target_heads(g, batch)?;
        let pos = self.tower(g, heads.item)?;
        let neg = self.tower_for(g, hv, &negatives.items)?;
        let mask = negatives.self_mask(batch.targets.len());
        let nip = self.nip_losses(g, heads.query, pos, neg, &negatives.log_q, &mask)?;
        let classes = batch.target_classes();
        let fp = self.fp_losses(g, heads.item_state, &classes)?;
        let both = g.add(nip, fp)?;
        let loss = g.weighted_sum(both, &batch.target_weight)?;
        Ok(PretrainOutput { loss, nip, fp })
    }

    /// Encodes the batch and evaluates both merge heads at every target row.
    pub fn target_heads<F: Float>(&self, g: &mut Graph<'_, F>, batch: &PackedBatch) -> Result<TargetHeads> {
        let emb = self.embed(g, &batch.rows)?;
        let h = self.encoder.forward(g, emb.x, &batch.segments)?;
        let prev: Vec<usize> = batch.targets.iter().map(|&r| batch.prev[r]).collect();
        let h_prev = self.states(g, h, &prev)?;
        let ctx = g.gather_rows(emb.ctx, &batch.targets)?;
        let item = g.gather_rows(emb.item, &batch.targets)?;
        let query = self.context_query(g, h_prev, ctx)?;
        let item_state = self.item_query(g, h_prev, ctx, item)?;
        Ok(TargetHeads { h, query, item_state, item })
    }

    /// Pairwise logistic fine-tuning loss, averaged over the batch's pairs.
    pub fn finetune_loss<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &FinetuneBatch,
        hv: &HashedVocab,
    ) -> Result<Var> {
        let scores = self.impression_scores(g, batch, hv)?;
        let n = batch.impressions.len();
        let s = g.reshape(scores, &[n, 1])?;
        let first: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
        let second: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();
        let s1 = g.gather_rows(s, &first)?;
        let s2 = g.gather_rows(s, &second)?;
        let margin = g.sub(s1, s2)?;
        let neg_margin = g.scale(margin, -1.0);
        let l = g.softplus(neg_margin);
        Ok(g.mean(l))
    }

    /// `<h_aligned, tower(item)>` for every impression of the batch.
    pub fn impression_scores<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &FinetuneBatch,
        hv: &HashedVocab,
    ) -> Result<Var> {
        if self.output_dim() != self.width() {
            return Err(ArgusError::Config(format!(
                "two-tower scoring needs output_dim == width, got {} vs {}",
                self.output_dim(),
                self.width()
            )));
        }
        let emb = self.embed(g, &batch.packed.rows)?;
        let h = self.encoder.forward(g, emb.x, &batch.packed.segments)?;
        let hs = self.states(g, h, &batch.aligned)?;
        let items: Vec<Sym> = batch.impressions.iter().map(|&r| batch.packed.items[r]).collect();
        let t = self.tower_for(g, hv, &items)?;
        g.row_dot(hs, t)
    }
}

pub struct TargetHeads {
    /// Encoder states for all rows.
    pub h: Var,
    /// Next-item queries at target rows.
    pub query: Var,
    /// Item-aware states at target rows.
    pub item_state: Var,
    /// Item sub-embeddings at target rows.
    pub item: Var,
}

pub struct PretrainOutput {
    pub loss: Var,
    /// Per-target next-item losses.
    pub nip: Var,
    /// Per-target feedback losses.
    pub fp: Var,
}

/// Chunks packed into one row-major batch.
#[derive(Clone, Debug, Default)]
pub struct PackedBatch {
    pub rows: InteractionRows,
    pub segments: Vec<Segment>,
    /// Index of `h_{t-1}` in `[h; h_init]` for every row.
    pub prev: Vec<usize>,
    pub items: Vec<Sym>,
    pub ts: Vec<i64>,
    pub classes: [Vec<usize>; NUM_FACTORS],
    pub is_impression: Vec<bool>,
    /// Rows that are prediction targets, in row order.
    pub targets: Vec<usize>,
    /// Loss weight per target: `1 / (chunks * targets in its chunk)`.
    pub target_weight: Vec<f64>,
    /// Chunk index of every target.
    pub target_chunk: Vec<usize>,
}

impl PackedBatch {
    pub fn new(chunks: &[Chunk<'_>], hv: &HashedVocab) -> Self {
        let n: usize = chunks.iter().map(|c| c.len()).sum();
        let mut b = PackedBatch { rows: InteractionRows::with_capacity(hv.item_lookups, n), ..Default::default() };
        let n_chunks = chunks.iter().filter(|c| !c.targets().is_empty()).count().max(1);
        for (ci, c) in chunks.iter().enumerate() {
            let start = b.rows.len();
            b.segments.push(Segment { start, len: c.len() });
            let n_targets = c.targets().len();
            for (p, it) in c.events.iter().enumerate() {
                let r = start + p;
                b.rows.push(hv, it, p);
                b.prev.push(if p == 0 { n } else { r - 1 });
                b.items.push(it.item);
                b.ts.push(it.ts);
                let cl = it.feedback.classes();
                for k in 0..NUM_FACTORS {
                    b.classes[k].push(cl[k]);
                }
                b.is_impression.push(it.is_impression);
                if p >= c.n_context {
                    b.targets.push(r);
                    b.target_weight.push(1.0 / (n_chunks * n_targets) as f64);
                    b.target_chunk.push(ci);
                }
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn target_items(&self) -> Vec<Sym> {
        self.targets.iter().map(|&r| self.items[r]).collect()
    }

    pub fn target_classes(&self) -> Vec<Vec<usize>> {
        self.classes.iter().map(|c| self.targets.iter().map(|&r| c[r]).collect()).collect()
    }
}

/// Fine-tuning batch: packed chunks, impressions aligned to states and
/// positive-first pairs over impressions.
#[derive(Clone, Debug, Default)]
pub struct FinetuneBatch {
    pub packed: PackedBatch,
    /// Batch rows of scored impressions.
    pub impressions: Vec<usize>,
    /// For each impression, its state index in `[h; h_init]`.
    pub aligned: Vec<usize>,
    /// Pairs as indices into `impressions`.
    pub pairs: Vec<(usize, usize)>,
}

impl FinetuneBatch {
    /// Pairs are formed within each chunk from impressions at target
    /// positions; only paired impressions are scored.
    pub fn new(chunks: &[Chunk<'_>], hv: &HashedVocab, window: usize, latency: i64, listen_tiebreak: bool) -> Self {
        let packed = PackedBatch::new(chunks, hv);
        let n = packed.len();
        let mut b = FinetuneBatch { packed, ..Default::default() };
        for (c, seg) in chunks.iter().zip(&b.packed.segments) {
            let targets = &c.events[c.n_context..];
            let pairs = build_impression_pairs(targets, window, listen_tiebreak);
            if pairs.is_empty() {
                continue;
            }
            let state_ts: Vec<i64> = c.events.iter().map(|e| e.ts).collect();
            let mut slot = std::collections::BTreeMap::new();
            for p in &pairs {
                for local in [p.first, p.second] {
                    let row = seg.start + c.n_context + local;
                    let len = b.impressions.len();
                    let next = *slot.entry(row).or_insert(len);
                    if next == len {
                        let a = align_impressions(&state_ts, &[c.events[c.n_context + local].ts], latency)[0];
                        b.impressions.push(row);
                        b.aligned.push(a.state.map_or(n, |s| seg.start + s));
                    }
                }
                b.pairs.push((slot[&(seg.start + c.n_context + p.first)], slot[&(seg.start + c.n_context + p.second)]));
            }
        }
        b
    }
}
