//! Two-stage training and evaluation driven by a [`RunConfig`].
//!
//! Everything runs on one thread in a fixed order, so a given config, seed
//! and dataset always yield the same checkpoints and reports.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{splitmix64, Graph, ParamStore};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{
    build_impression_pairs, chunk_sequences, holdout_chunks, load_events, temporal_split, write_records, Chunk,
    DatasetHeader, EventLog, HoldoutSequence, ImpressionPair, Sym, TemporalSplit, NUM_FACTORS,
};
use crate::embedding::HashedVocab;
use crate::error::{ArgusError, Result};
use crate::metrics::{
    baseline_scores, feedback_ne, loss_ratio, pairwise_accuracy, pau, BaselineKind, FeedbackBaseline, MetricsReport,
    ScoredImpression, Unigram,
};
use crate::model::{FinetuneBatch, Model, PackedBatch};
use crate::objectives::{align_impressions, nip_loss, Temperature};
use crate::optim::{Adam, StepOutcome};
use crate::sampling::{draw_negatives, item_key, CountMinSketch};
use crate::tensor::Tensor;
use crate::world::{World, WorldConfig, SECONDS_PER_DAY};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NEGATIVE_STREAM: u64 = 0x4e45_4753;
const DROPOUT_STREAM: u64 = 0x4452_4f50;
const EVAL_STREAM: u64 = 0x4556_414c;
const SKETCH_STREAM: u64 = 0x534b_4554;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// A loaded event log split at the evaluation cutoff.
pub struct Dataset {
    pub header: DatasetHeader,
    pub log: EventLog,
    pub split: TemporalSplit,
    pub cutoff: i64,
    pub span: i64,
    pub hv: HashedVocab,
    /// Distinct items of the training window.
    pub catalog: Vec<Sym>,
    /// Sketch key per symbol.
    pub keys: Vec<u64>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let header = DatasetHeader::load(&cfg.data.header)?;
        let log = load_events(&cfg.data.events, &header.surfaces)?;
        Self::from_log(cfg, header, log)
    }

    pub fn from_log(cfg: &RunConfig, header: DatasetHeader, log: EventLog) -> Result<Self> {
        let span = cfg.data.holdout_days as i64 * SECONDS_PER_DAY;
        let cutoff = match cfg.data.cutoff_ts {
            Some(c) => c,
            None => {
                if header.n_days <= cfg.data.holdout_days {
                    return Err(ArgusError::Config(format!(
                        "dataset covers {} days, cannot hold out {}",
                        header.n_days, cfg.data.holdout_days
                    )));
                }
                (header.n_days - cfg.data.holdout_days) as i64 * SECONDS_PER_DAY
            }
        };
        let split = temporal_split(&log.sequences, cutoff, span);
        let hv = HashedVocab::new(&cfg.model.table(), &log.vocab, cfg.model.embedding.item_lookups);
        let catalog: Vec<Sym> = split
            .train
            .iter()
            .flat_map(|s| s.interactions.iter().map(|i| i.item))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let keys = (0..log.vocab.len() as Sym).map(|s| item_key(log.vocab.name(s))).collect();
        Ok(Self { header, log, split, cutoff, span, hv, catalog, keys })
    }

    /// The generating world, when the header carries one.
    pub fn world(&self) -> Result<Option<World>> {
        match &self.header.world {
            Some(v) => {
                let wc: WorldConfig = serde_json::from_value(v.clone())?;
                Ok(Some(World::new(wc)?))
            }
            None => Ok(None),
        }
    }

    pub fn item_name(&self, s: Sym) -> &str {
        self.log.vocab.name(s)
    }

    /// Sketch over every training-window interaction.
    pub fn train_sketch(&self, cfg: &RunConfig) -> Result<CountMinSketch> {
        let mut sketch = new_sketch(cfg)?;
        for it in self.split.train.iter().flat_map(|s| &s.interactions) {
            sketch.insert(self.keys[it.item as usize]);
        }
        Ok(sketch)
    }
}

fn new_sketch(cfg: &RunConfig) -> Result<CountMinSketch> {
    CountMinSketch::new(cfg.sampling.sketch_depth, cfg.sampling.sketch_width, splitmix64(cfg.seed ^ SKETCH_STREAM))
}

/// Writes the synthetic event log and header configured by `cfg.world`.
pub fn generate(cfg: &RunConfig) -> Result<usize> {
    let world = World::new(cfg.world.clone())?;
    let records = world.generate(cfg.world.n_days);
    for p in [&cfg.data.events, &cfg.data.header] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| ArgusError::io(dir, e))?;
        }
    }
    write_records(&cfg.data.events, &records)?;
    cfg.world.header().save(&cfg.data.header)?;
    Ok(records.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    /// Pre-training components (zero during fine-tuning).
    pub nip: f64,
    pub fp: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub temperature: f64,
    pub skipped: bool,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub sketch: Option<CountMinSketch>,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    /// Mean loss over the last tenth of the steps.
    pub fn final_loss(&self) -> f64 {
        tail_mean(&self.log)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, stage: &str) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            stage: stage.to_string(),
            architecture_digest: cfg.architecture_digest()?,
            config_digest: cfg.digest()?,
            seed: cfg.seed,
            step: self.adam.step,
            skipped_steps: self.adam.skipped,
            adam: self.adam.config.clone(),
            sketch: self.sketch.clone(),
            config: serde_json::to_value(cfg)?,
        };
        Ok(Checkpoint::new(meta, &self.store, Some(&self.adam)))
    }
}

fn tail_mean(log: &[StepLog]) -> f64 {
    let applied: Vec<f64> = log.iter().filter(|s| !s.skipped).map(|s| s.loss).collect();
    if applied.is_empty() {
        return f64::NAN;
    }
    let n = (applied.len() / 10).max(1);
    applied[applied.len() - n..].iter().sum::<f64>() / n as f64
}

/// Model for a training stage: restored from `init`, or fresh with feedback
/// heads predicting the training-window class priors.
fn training_model(cfg: &RunConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = build_model(cfg, init)?;
    if init.is_none() {
        model.set_feedback_priors(&mut store, &FeedbackBaseline::from_train(&data.split.train).freqs)?;
    }
    Ok((model, store))
}

/// Fresh model, or one restored from `init` after checking its layout.
pub fn build_model(cfg: &RunConfig, init: Option<&Checkpoint>) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::new::<f32>(&cfg.model, cfg.seed)?;
    if let Some(ck) = init {
        let want = cfg.architecture_digest()?;
        if ck.meta.architecture_digest != want {
            return Err(ArgusError::Checkpoint(format!(
                "architecture digest {} does not match config ({want})",
                ck.meta.architecture_digest
            )));
        }
        ck.load_params(&mut store)?;
    }
    Ok((model, store))
}

fn temperature(model: &Model, store: &ParamStore<f32>) -> f64 {
    Temperature(store.value(model.tau_id()).item() as f64).scale()
}

fn shuffled_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, SHUFFLE_STREAM));
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// One epoch of next-item plus feedback pre-training.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let (model, mut store) = training_model(cfg, data, init)?;
    let chunks = chunk_sequences(&data.split.train, cfg.train.pretrain_len);
    if chunks.is_empty() {
        return Err(ArgusError::Empty("no training chunks in the training window".into()));
    }
    let mut batches = shuffled_batches(chunks.len(), cfg.train.batch_size, cfg.seed);
    if let Some(m) = cfg.train.max_steps {
        batches.truncate(m as usize);
    }
    let total = batches.len() as u64;
    let mut sketch = new_sketch(cfg)?;
    let mut adam = Adam::new(cfg.train.adam.clone(), &store);
    let mut neg_rng = rng_for(cfg.seed, NEGATIVE_STREAM);
    let s = &cfg.sampling;
    let mut log = Vec::with_capacity(batches.len());
    log::info!("pretrain: {} chunks, {} steps, {} parameters", chunks.len(), total, store.num_values());
    for (step, b) in batches.iter().enumerate() {
        let step = step as u64;
        let batch_chunks: Vec<Chunk<'_>> = b.iter().map(|&i| chunks[i]).collect();
        let pb = PackedBatch::new(&batch_chunks, &data.hv);
        let positives = pb.target_items();
        for &p in &positives {
            sketch.insert(data.keys[p as usize]);
        }
        let negs = draw_negatives(
            &positives,
            &data.catalog,
            s.n_uniform,
            s.n_inbatch,
            &sketch,
            |x| data.keys[x as usize],
            &mut neg_rng,
        )?;
        let (loss, nip, fp, mut grads) = {
            let mut g = Graph::with_params(&store, true, splitmix64(cfg.seed ^ DROPOUT_STREAM ^ splitmix64(step)));
            let out = model.pretrain_loss(&mut g, &pb, &data.hv, &negs)?;
            let wsum =
                |v: &Tensor<f32>| -> f64 { v.data().iter().zip(&pb.target_weight).map(|(&x, w)| x as f64 * w).sum() };
            let loss = g.value(out.loss).item() as f64;
            let nip = wsum(g.value(out.nip));
            let fp = wsum(g.value(out.fp));
            (loss, nip, fp, g.backward(out.loss).into_params())
        };
        let sched = &cfg.train.schedule;
        let lr_b = sched.lr(step, crate::ParamGroup::Backbone, total);
        let lr_h = sched.lr(step, crate::ParamGroup::Head, total);
        let outcome = adam.update(&mut store, &mut grads, |g| match g {
            crate::ParamGroup::Backbone => lr_b,
            crate::ParamGroup::Head => lr_h,
        })?;
        let (grad_norm, clipped_norm, skipped) = match outcome {
            StepOutcome::Applied { grad_norm, clipped_norm } => (grad_norm, clipped_norm, false),
            StepOutcome::Skipped => (f64::NAN, f64::NAN, true),
        };
        let entry = StepLog {
            step,
            loss,
            nip,
            fp,
            lr_backbone: lr_b,
            lr_head: lr_h,
            grad_norm,
            clipped_norm,
            temperature: temperature(&model, &store),
            skipped,
        };
        if cfg.train.log_every > 0 && (step.is_multiple_of(cfg.train.log_every) || step + 1 == total) {
            log::info!(
                "pretrain step {step}/{total}: loss {loss:.4} (nip {nip:.4}, fp {fp:.4}) |g| {grad_norm:.3} temp {:.4}",
                entry.temperature
            );
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, store, adam, sketch: Some(sketch), log })
}

/// One pass of pairwise fine-tuning over aligned impression pairs.
pub fn finetune(cfg: &RunConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let (model, mut store) = training_model(cfg, data, init)?;
    let chunks = chunk_sequences(&data.split.train, cfg.train.finetune_len);
    let l = &cfg.loss;
    let n_pairs: usize =
        chunks.iter().map(|c| build_impression_pairs(c.events, l.pair_window, l.listen_tiebreak).len()).sum();
    if n_pairs == 0 {
        let n_imp: usize = chunks.iter().map(|c| c.events.iter().filter(|e| e.is_impression).count()).sum();
        return Err(ArgusError::NoPairs(format!(
            "{} chunks with {n_imp} impressions, window {}, no impression pair with differing feedback",
            chunks.len(),
            l.pair_window
        )));
    }
    let mut batches = shuffled_batches(chunks.len(), cfg.train.finetune_batch_size, cfg.seed ^ 0x4654);
    if let Some(m) = cfg.train.max_steps {
        batches.truncate(m as usize);
    }
    let prepared: Vec<FinetuneBatch> = batches
        .iter()
        .map(|b| {
            let cs: Vec<Chunk<'_>> = b.iter().map(|&i| chunks[i]).collect();
            FinetuneBatch::new(&cs, &data.hv, l.pair_window, l.latency, l.listen_tiebreak)
        })
        .filter(|fb| !fb.pairs.is_empty())
        .collect();
    let total = prepared.len() as u64;
    log::info!("finetune: {} chunks, {n_pairs} pairs, {total} steps", chunks.len());
    let mut adam = Adam::new(cfg.train.adam.clone(), &store);
    let mut log = Vec::with_capacity(prepared.len());
    for (step, fb) in prepared.iter().enumerate() {
        let step = step as u64;
        let (loss, mut grads) = {
            let mut g =
                Graph::with_params(&store, true, splitmix64(cfg.seed ^ DROPOUT_STREAM ^ 0x4654 ^ splitmix64(step)));
            let loss = model.finetune_loss(&mut g, fb, &data.hv)?;
            (g.value(loss).item() as f64, g.backward(loss).into_params())
        };
        let sched = &cfg.train.schedule;
        let lr_b = sched.lr(step, crate::ParamGroup::Backbone, total);
        let lr_h = sched.lr(step, crate::ParamGroup::Head, total);
        let outcome = adam.update(&mut store, &mut grads, |g| match g {
            crate::ParamGroup::Backbone => lr_b,
            crate::ParamGroup::Head => lr_h,
        })?;
        let (grad_norm, clipped_norm, skipped) = match outcome {
            StepOutcome::Applied { grad_norm, clipped_norm } => (grad_norm, clipped_norm, false),
            StepOutcome::Skipped => (f64::NAN, f64::NAN, true),
        };
        if cfg.train.log_every > 0 && (step.is_multiple_of(cfg.train.log_every) || step + 1 == total) {
            log::info!("finetune step {step}/{total}: pair loss {loss:.4} over {} pairs", fb.pairs.len());
        }
        log.push(StepLog {
            step,
            loss,
            nip: 0.0,
            fp: 0.0,
            lr_backbone: lr_b,
            lr_head: lr_h,
            grad_norm,
            clipped_norm,
            temperature: temperature(&model, &store),
            skipped,
        });
    }
    let sketch = init.and_then(|c| c.meta.sketch.clone());
    Ok(TrainOutcome { model, store, adam, sketch, log })
}

/// Greedy covering of sorted state indices by windows of at most `len`
/// rows, each needed state keeping at least `len / 2` rows of context when
/// the history allows it. Returns inclusive `(start, end)` pairs.
pub fn state_windows(needed: &[usize], len: usize) -> Vec<(usize, usize)> {
    let half = len / 2;
    let mut out = Vec::new();
    let mut i = 0;
    while i < needed.len() {
        let j0 = needed[i];
        let mut e = i;
        while e + 1 < needed.len() && needed[e + 1] - j0 <= half {
            e += 1;
        }
        let end = needed[e];
        out.push(((end + 1).saturating_sub(len), end));
        i = e + 1;
    }
    out
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<ScoredImpression>,
}

struct UserImpressions<'a> {
    seq: &'a HoldoutSequence,
    /// Absolute indices of holdout impressions in `seq.interactions`.
    imps: Vec<usize>,
    /// Aligned state per impression.
    states: Vec<Option<usize>>,
    /// Pairs over holdout targets, as indices into `imps`.
    pairs: Vec<ImpressionPair>,
}

/// Computes the full metrics report on the holdout window.
pub fn evaluate(cfg: &RunConfig, data: &Dataset, model: &Model, store: &ParamStore<f32>) -> Result<Evaluation> {
    let mut report = MetricsReport {
        baseline: BaselineKind::Popularity.name().to_string(),
        eval_uniform_negatives: cfg.sampling.eval_uniform,
        eval_inbatch_negatives: cfg.sampling.eval_inbatch,
        config_digest: cfg.digest()?,
        seed: cfg.seed,
        n_users: data.split.test.len(),
        ..Default::default()
    };
    entropy_metrics(cfg, data, model, store, &mut report)?;
    let scores = pair_metrics(cfg, data, model, store, &mut report)?;
    Ok(Evaluation { report, scores })
}

fn entropy_metrics(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Model,
    store: &ParamStore<f32>,
    report: &mut MetricsReport,
) -> Result<()> {
    let baseline = FeedbackBaseline::from_train(&data.split.train);
    let unigram = Unigram::new(data.split.train.iter().flat_map(|s| &s.interactions).map(|i| data.item_name(i.item)));
    let sketch = data.train_sketch(cfg)?;
    let chunks: Vec<Chunk<'_>> =
        data.split.test.iter().flat_map(|s| holdout_chunks(s, cfg.train.pretrain_len)).collect();
    let mut probs: [Vec<Vec<f64>>; NUM_FACTORS] = Default::default();
    let mut labels: [Vec<usize>; NUM_FACTORS] = Default::default();
    let (mut model_nip, mut unigram_nip) = (0.0, 0.0);
    let mut rng = rng_for(cfg.seed, EVAL_STREAM);
    let s = &cfg.sampling;
    for b in chunks.chunks(cfg.train.batch_size) {
        let pb = PackedBatch::new(b, &data.hv);
        if pb.targets.is_empty() {
            continue;
        }
        let positives = pb.target_items();
        let negs = draw_negatives(
            &positives,
            &data.catalog,
            s.eval_uniform,
            s.eval_inbatch,
            &sketch,
            |x| data.keys[x as usize],
            &mut rng,
        )?;
        let mut g = Graph::with_params(store, false, 0);
        let heads = model.target_heads(&mut g, &pb)?;
        let logits = model.feedback_logits(&mut g, heads.item_state)?;
        let classes = pb.target_classes();
        for k in 0..NUM_FACTORS {
            let p = g.softmax(logits[k]);
            let t = g.value(p);
            for r in 0..t.rows() {
                probs[k].push(t.row(r).iter().map(|&x| x as f64).collect());
            }
            labels[k].extend_from_slice(&classes[k]);
        }
        let pos = model.tower(&mut g, heads.item)?;
        let neg = model.tower_for(&mut g, &data.hv, &negs.items)?;
        let mask = negs.self_mask(positives.len());
        let nip = model.nip_losses(&mut g, heads.query, pos, neg, &negs.log_q, &mask)?;
        model_nip += g.value(nip).data().iter().map(|&x| x as f64).sum::<f64>();
        let neg_lp: Vec<f64> = negs.items.iter().map(|&n| unigram.log_prob(data.item_name(n))).collect();
        let m = negs.len();
        for (q, &p) in positives.iter().enumerate() {
            let (mut sn, mut lq) = (Vec::with_capacity(m), Vec::with_capacity(m));
            for j in 0..m {
                if !mask[q * m + j] {
                    sn.push(neg_lp[j]);
                    lq.push(negs.log_q[j]);
                }
            }
            unigram_nip += nip_loss(unigram.log_prob(data.item_name(p)), &sn, &lq)?;
        }
        report.n_targets += positives.len();
    }
    report.feedback_ne = feedback_ne(&probs, &labels, &baseline)?;
    report.next_item_ne = loss_ratio(model_nip, unigram_nip);
    Ok(())
}

/// Encoder states for `(user, window)` requests, keyed by user and absolute
/// index.
fn encode_states(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Model,
    store: &ParamStore<f32>,
    users: &[UserImpressions<'_>],
) -> Result<HashMap<(usize, usize), Vec<f32>>> {
    let mut requests: Vec<(usize, usize, usize)> = Vec::new();
    for (u, ui) in users.iter().enumerate() {
        let needed: Vec<usize> = ui.states.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        for (start, end) in state_windows(&needed, cfg.train.finetune_len) {
            requests.push((u, start, end));
        }
    }
    let mut out = HashMap::new();
    for batch in requests.chunks(cfg.train.finetune_batch_size) {
        let chunks: Vec<Chunk<'_>> = batch
            .iter()
            .map(|&(u, s, e)| Chunk {
                user_id: &users[u].seq.user_id,
                events: &users[u].seq.interactions[s..=e],
                n_context: 0,
            })
            .collect();
        let pb = PackedBatch::new(&chunks, &data.hv);
        let mut g = Graph::with_params(store, false, 0);
        let emb = model.embed(&mut g, &pb.rows)?;
        let h = model.encoder.forward(&mut g, emb.x, &pb.segments)?;
        let h = g.value(h);
        for (&(u, s, e), seg) in batch.iter().zip(&pb.segments) {
            for j in s..=e {
                out.entry((u, j)).or_insert_with(|| h.row(seg.start + j - s).to_vec());
            }
        }
    }
    Ok(out)
}

fn pair_metrics(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Model,
    store: &ParamStore<f32>,
    report: &mut MetricsReport,
) -> Result<Vec<ScoredImpression>> {
    let l = &cfg.loss;
    let users: Vec<UserImpressions<'_>> = data
        .split
        .test
        .iter()
        .map(|seq| {
            let imps: Vec<usize> =
                (seq.n_context..seq.interactions.len()).filter(|&i| seq.interactions[i].is_impression).collect();
            let state_ts: Vec<i64> = seq.interactions.iter().map(|i| i.ts).collect();
            let imp_ts: Vec<i64> = imps.iter().map(|&i| seq.interactions[i].ts).collect();
            let states = align_impressions(&state_ts, &imp_ts, l.latency).into_iter().map(|a| a.state).collect();
            let only: Vec<_> = imps.iter().map(|&i| seq.interactions[i]).collect();
            let pairs = build_impression_pairs(&only, l.pair_window, l.listen_tiebreak);
            UserImpressions { seq, imps, states, pairs }
        })
        .collect();
    let states = encode_states(cfg, data, model, store, &users)?;
    let h_init: Vec<f32> = store.value(model.h_init_id()).data().to_vec();

    let items: Vec<Sym> = users.iter().flat_map(|u| u.imps.iter().map(|&i| u.seq.interactions[i].item)).collect();
    let mut tower_rows: Vec<Vec<f32>> = Vec::with_capacity(items.len());
    for part in items.chunks(4096) {
        let mut g = Graph::with_params(store, false, 0);
        let t = model.tower_for(&mut g, &data.hv, part)?;
        let t = g.value(t);
        tower_rows.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
    }

    let mut scored = Vec::with_capacity(items.len());
    let mut pairs = Vec::new();
    let mut k = 0;
    for (u, ui) in users.iter().enumerate() {
        let base = scored.len();
        for (n, &i) in ui.imps.iter().enumerate() {
            let h = match ui.states[n] {
                Some(j) => &states[&(u, j)],
                None => &h_init,
            };
            let score: f64 = h.iter().zip(&tower_rows[k]).map(|(&a, &b)| a as f64 * b as f64).sum();
            let it = &ui.seq.interactions[i];
            scored.push(ScoredImpression {
                user_id: ui.seq.user_id.clone(),
                ts: it.ts,
                item_id: data.item_name(it.item).to_string(),
                score,
            });
            k += 1;
        }
        pairs.extend(ui.pairs.iter().map(|p| ImpressionPair { first: base + p.first, second: base + p.second }));
    }
    report.n_impressions = scored.len();
    report.n_pairs = pairs.len();
    if pairs.is_empty() {
        log::warn!("no holdout impression pairs; PA not computed");
        return Ok(scored);
    }
    let model_scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    report.pa = Some(pairwise_accuracy(&model_scores, &pairs)?);

    let mut counts: HashMap<String, u64> = HashMap::new();
    for it in data.split.train.iter().flat_map(|s| &s.interactions).filter(|i| i.is_impression) {
        *counts.entry(data.item_name(it.item).to_string()).or_default() += 1;
    }
    let world = data.world()?;
    for kind in [BaselineKind::Popularity, BaselineKind::OracleRelevance, BaselineKind::Constant] {
        if kind == BaselineKind::OracleRelevance && world.is_none() {
            continue;
        }
        let s = baseline_scores(kind, &scored, &counts, world.as_ref())?;
        report.baseline_pa.push((kind.name().to_string(), pairwise_accuracy(&s, &pairs)?));
    }
    report.pa_baseline = report.baseline_pa.iter().find(|(n, _)| n == &report.baseline).map(|(_, v)| *v);
    if let (Some(a), Some(b)) = (report.pa, report.pa_baseline) {
        report.pau = Some(pau(a, b)?);
    }
    Ok(scored)
}

/// `user_id\tts\titem_id\tscore` per holdout impression.
pub fn write_scores(path: &Path, scores: &[ScoredImpression]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| ArgusError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for s in scores {
        writeln!(w, "{}\t{}\t{}\t{:.9e}", s.user_id, s.ts, s.item_id, s.score).map_err(|e| ArgusError::io(path, e))?;
    }
    w.flush().map_err(|e| ArgusError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ArgusError::io(path, e))
}

/// Creates the output directory and echoes the resolved config into it.
pub fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| ArgusError::io(&dir, e))?;
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    Ok(dir)
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut text = String::new();
    for s in log {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// `generate` stage: writes the dataset.
pub fn run_generate(cfg: &RunConfig) -> Result<usize> {
    prepare_out_dir(cfg)?;
    let n = generate(cfg)?;
    log::info!("wrote {n} events to {}", cfg.data.events.display());
    Ok(n)
}

/// `pretrain` stage: writes `pretrain.ckpt` and `pretrain_log.jsonl`.
pub fn run_pretrain(cfg: &RunConfig, init: Option<&Path>) -> Result<PathBuf> {
    let dir = prepare_out_dir(cfg)?;
    let data = Dataset::load(cfg)?;
    let init = init.map(Checkpoint::load).transpose()?;
    let out = pretrain(cfg, &data, init.as_ref())?;
    write_log(&dir.join("pretrain_log.jsonl"), &out.log)?;
    let path = dir.join("pretrain.ckpt");
    out.checkpoint(cfg, "pretrain")?.save(&path)?;
    Ok(path)
}

/// `finetune` stage: writes `finetune.ckpt` and `finetune_log.jsonl`.
pub fn run_finetune(cfg: &RunConfig, init: Option<&Path>) -> Result<PathBuf> {
    let dir = prepare_out_dir(cfg)?;
    let data = Dataset::load(cfg)?;
    let init = init.map(Checkpoint::load).transpose()?;
    let out = finetune(cfg, &data, init.as_ref())?;
    write_log(&dir.join("finetune_log.jsonl"), &out.log)?;
    let path = dir.join("finetune.ckpt");
    out.checkpoint(cfg, "finetune")?.save(&path)?;
    Ok(path)
}

/// `evaluate` stage: writes `metrics.json`, `metrics.txt` and `scores.tsv`.
pub fn run_evaluate(cfg: &RunConfig, ckpt: &Path) -> Result<MetricsReport> {
    let dir = prepare_out_dir(cfg)?;
    let data = Dataset::load(cfg)?;
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = build_model(cfg, Some(&ck))?;
    let ev = evaluate(cfg, &data, &model, &store)?;
    write_text(&dir.join("metrics.json"), &ev.report.to_json()?)?;
    write_text(&dir.join("metrics.txt"), &ev.report.to_table())?;
    write_scores(&dir.join("scores.tsv"), &ev.scores)?;
    Ok(ev.report)
}
