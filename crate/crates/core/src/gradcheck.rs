//! Central finite-difference oracle for checking backward rules.
//!
//! The oracle only evaluates forward passes; it never reads the tape's
//! backward rules, so it stays independent of the code it checks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error found by a check, with where it occurred.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let e = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            if e >= self.max_rel_error {
                self.worst = Some((label.to_string(), index, analytic, numeric));
            }
        }
    }
}

/// Checks the gradient of a scalar function of several input tensors.
///
/// `build` records the function on a fresh graph given leaf handles for the
/// inputs and returns the single-value output.
pub fn check_inputs<B>(inputs: &[Tensor<f64>], step: f64, floor: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    check_inputs_in(Graph::new, inputs, step, floor, build)
}

/// As [`check_inputs`], with every graph created by `fresh` (for example a
/// train-mode graph with a fixed dropout seed).
pub fn check_inputs_in<'a, N, B>(
    fresh: N,
    inputs: &[Tensor<f64>],
    step: f64,
    floor: f64,
    build: B,
) -> Result<GradCheckReport>
where
    N: Fn() -> Graph<'a, f64>,
    B: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = fresh();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = fresh();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(&format!("input {k}"), i, analytic.data()[i], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar loss on a sample of coordinates.
///
/// Per parameter tensor, up to `per_param` coordinates are checked; half of
/// them are drawn from coordinates with a nonzero analytic gradient so that
/// sparse gradients (embedding tables) are actually exercised.
pub fn check_params<L, R>(
    store: &ParamStore<f64>,
    analytic: &[Option<Tensor<f64>>],
    per_param: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore<f64>) -> Result<f64>,
    R: Rng,
{
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        let zeros = Tensor::zeros(p.value.shape());
        let grad = analytic.get(id.0).and_then(|g| g.as_ref()).unwrap_or(&zeros);
        let mut nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad.data()[i] != 0.0).collect();
        nonzero.shuffle(rng);
        let mut coords: Vec<usize> = nonzero.into_iter().take(per_param.div_ceil(2)).collect();
        while coords.len() < per_param.min(grad.len()) {
            let c = rng.random_range(0..grad.len());
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        for &i in &coords {
            let numeric = central_difference(&mut work, id, i, step, &loss)?;
            report.record(&p.name, i, grad.data()[i], numeric, floor);
        }
    }
    Ok(report)
}

fn central_difference<L>(work: &mut ParamStore<f64>, id: ParamId, i: usize, step: f64, loss: &L) -> Result<f64>
where
    L: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let orig = work.value(id).data()[i];
    work.value_mut(id).data_mut()[i] = orig + step;
    let plus = loss(work)?;
    work.value_mut(id).data_mut()[i] = orig - step;
    let minus = loss(work)?;
    work.value_mut(id).data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * step))
}

/// Deterministic non-uniform weights used to reduce an op's output to a
/// scalar, so that every output entry carries a distinct upstream gradient.
fn reduce(g: &mut Graph<'_, f64>, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * (i as f64 * 1.7 + 0.3).sin()).collect();
    g.weighted_sum(v, &w)
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>);

/// Finite-difference checks of every differentiable graph operation on
/// random inputs, in 64-bit arithmetic.
pub fn op_suite(seed: u64, step: f64, floor: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::autograd::Segment;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let cases: Vec<OpCase> = vec![
        (
            "matmul",
            vec![random(r, &[3, 4], 1.0), random(r, &[4, 2], 1.0)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "matmul_nt",
            vec![random(r, &[3, 4], 1.0), random(r, &[5, 4], 1.0)],
            Box::new(|g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "add",
            vec![random(r, &[2, 3], 1.0), random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "sub",
            vec![random(r, &[2, 3], 1.0), random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "mul",
            vec![random(r, &[2, 3], 1.0), random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "add_row",
            vec![random(r, &[3, 4], 1.0), random(r, &[4], 1.0)],
            Box::new(|g, v| {
                let y = g.add_row(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "linear",
            vec![random(r, &[3, 4], 1.0), random(r, &[4, 2], 1.0), random(r, &[2], 1.0)],
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                reduce(g, y)
            }),
        ),
        (
            "scale",
            vec![random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.3);
                reduce(g, y)
            }),
        ),
        (
            "scale_by",
            vec![random(r, &[2, 3], 1.0), random(r, &[1], 2.0)],
            Box::new(|g, v| {
                let y = g.scale_by(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "concat_cols",
            vec![random(r, &[2, 3], 1.0), random(r, &[2, 1], 1.0)],
            Box::new(|g, v| {
                let y = g.concat_cols(&[v[0], v[1]])?;
                reduce(g, y)
            }),
        ),
        (
            "concat_rows",
            vec![random(r, &[2, 3], 1.0), random(r, &[1, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.concat_rows(&[v[0], v[1]])?;
                reduce(g, y)
            }),
        ),
        (
            "gather_rows",
            vec![random(r, &[4, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
                reduce(g, y)
            }),
        ),
        (
            "embedding_gather",
            vec![random(r, &[5, 2], 1.0)],
            Box::new(|g, v| {
                let y = g.embedding_gather(v[0], &[4, 4, 1])?;
                reduce(g, y)
            }),
        ),
        (
            "slice_rows",
            vec![random(r, &[4, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.slice_rows(v[0], 1, 2)?;
                reduce(g, y)
            }),
        ),
        (
            "reshape",
            vec![random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.reshape(v[0], &[3, 2])?;
                reduce(g, y)
            }),
        ),
        (
            "gelu",
            vec![random(r, &[3, 4], 3.0)],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                reduce(g, y)
            }),
        ),
        (
            "layer_norm",
            vec![random(r, &[3, 5], 2.0), random(r, &[5], 1.0), random(r, &[5], 1.0)],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                reduce(g, y)
            }),
        ),
        (
            "softmax",
            vec![random(r, &[3, 4], 2.0)],
            Box::new(|g, v| {
                let y = g.softmax(v[0]);
                reduce(g, y)
            }),
        ),
        (
            "l2_normalize",
            vec![random(r, &[3, 4], 1.0)],
            Box::new(|g, v| {
                let y = g.l2_normalize(v[0]);
                reduce(g, y)
            }),
        ),
        (
            "row_dot",
            vec![random(r, &[3, 4], 1.0), random(r, &[3, 4], 1.0)],
            Box::new(|g, v| {
                let y = g.row_dot(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "cosine_similarity",
            vec![random(r, &[3, 4], 1.0), random(r, &[3, 4], 1.0)],
            Box::new(|g, v| {
                let y = g.cosine_similarity(v[0], v[1])?;
                reduce(g, y)
            }),
        ),
        (
            "log_sum_exp",
            vec![random(r, &[3, 4], 3.0)],
            Box::new(|g, v| {
                let y = g.log_sum_exp(v[0]);
                reduce(g, y)
            }),
        ),
        (
            "cross_entropy",
            vec![random(r, &[3, 4], 3.0)],
            Box::new(|g, v| {
                let y = g.cross_entropy(v[0], &[1, 3, 0])?;
                reduce(g, y)
            }),
        ),
        (
            "mask_fill",
            vec![random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.mask_fill(v[0], &[false, true, false, false, false, true])?;
                let y = g.log_sum_exp(y);
                reduce(g, y)
            }),
        ),
        (
            "softplus",
            vec![random(r, &[2, 3], 4.0)],
            Box::new(|g, v| {
                let y = g.softplus(v[0]);
                reduce(g, y)
            }),
        ),
        (
            "sum",
            vec![random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            }),
        ),
        (
            "mean",
            vec![random(r, &[2, 3], 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.mean(y))
            }),
        ),
        (
            "weighted_sum",
            vec![random(r, &[5], 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                g.weighted_sum(y, &[0.5, -1.0, 2.0, 0.0, 1.5])
            }),
        ),
        (
            "inv_clamped_exp",
            vec![Tensor::scalar(-0.7)],
            Box::new(|g, v| {
                let y = g.inv_clamped_exp(v[0], 0.01, 100.0)?;
                let y = g.mul(y, y)?;
                reduce(g, y)
            }),
        ),
        (
            "causal_attention",
            vec![random(r, &[5, 4], 1.0), random(r, &[5, 4], 1.0), random(r, &[5, 4], 1.0)],
            Box::new(|g, v| {
                let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
                let y = g.causal_attention(v[0], v[1], v[2], &segs, 2)?;
                reduce(g, y)
            }),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, build) in &cases {
        out.push((name.to_string(), check_inputs(inputs, step, floor, |g, v| build(g, v))?));
    }
    let x = random(r, &[4, 5], 1.0);
    let dropout_seed = seed ^ 0xd0;
    let report = check_inputs_in(
        || Graph::train_mode(dropout_seed),
        &[x],
        step,
        floor,
        |g, v| {
            let y = g.dropout(v[0], 0.3);
            let y = g.mul(y, v[0])?;
            reduce(g, y)
        },
    )?;
    out.push(("dropout".to_string(), report));
    Ok(out)
}

/// Finite-difference check of the full pre-training loss on a tiny model
/// (`layers` blocks of width `width`, chunks of length `len`), in train
/// mode with a fixed dropout stream. Checks up to `per_param` coordinates
/// of every parameter tensor.
pub fn pretrain_loss_check(
    seed: u64,
    layers: usize,
    width: usize,
    len: usize,
    per_param: usize,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    use crate::data::{Chunk, Feedback, Interaction, Vocab};
    use crate::embedding::HashedVocab;
    use crate::encoder::EncoderConfig;
    use crate::model::{EmbeddingConfig, Model, ModelConfig, PackedBatch};
    use crate::sampling::{draw_negatives, item_key, CountMinSketch};
    use rand::SeedableRng;

    let config = ModelConfig {
        encoder: EncoderConfig { n_layers: layers, width, n_heads: 2, ff_mult: 2, dropout: 0.1, max_len: len },
        embedding: EmbeddingConfig { table_rows: 97, dim: 4, item_lookups: 3, hash_seed: seed },
        output_dim: 0,
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::new::<f64>(&config, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    // zero-initialized tensors (biases, feedback heads) would hide their
    // contribution to other parameters' gradients
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let t = store.value_mut(id);
        if t.data().iter().all(|&x| x == 0.0) {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
    }
    let mut vocab = Vocab::default();
    let surfaces = [vocab.intern("search"), vocab.intern("feed")];
    let devices = [vocab.intern("mobile"), vocab.intern("desktop")];
    let catalog: Vec<_> = (0..12).map(|i| vocab.intern(&format!("item{i}"))).collect();
    let hv = HashedVocab::new(&config.table(), &vocab, config.embedding.item_lookups);
    let sequences: Vec<Vec<Interaction>> = (0..2)
        .map(|_| {
            (0..len)
                .map(|t| {
                    let s = rng.random_range(0..2);
                    Interaction {
                        ts: t as i64 * 60,
                        surface: surfaces[s],
                        device: devices[rng.random_range(0..2)],
                        item: catalog[rng.random_range(0..catalog.len())],
                        feedback: Feedback::new(rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..4))
                            .expect("valid classes"),
                        is_impression: s == 1,
                    }
                })
                .collect()
        })
        .collect();
    let chunks: Vec<Chunk<'_>> = sequences.iter().map(|events| Chunk { user_id: "u", events, n_context: 0 }).collect();
    let batch = PackedBatch::new(&chunks, &hv);
    let positives = batch.target_items();
    let mut sketch = CountMinSketch::new(2, 64, seed)?;
    let keys: Vec<u64> = (0..vocab.len() as u32).map(|s| item_key(vocab.name(s))).collect();
    for &p in &positives {
        sketch.insert(keys[p as usize]);
    }
    let negatives = draw_negatives(&positives, &catalog, 5, 5, &sketch, |x| keys[x as usize], &mut rng)?;

    let dropout_seed = seed ^ 0xd1;
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s, true, dropout_seed);
        let out = model.pretrain_loss(&mut g, &batch, &hv, &negatives)?;
        Ok(g.value(out.loss).item())
    };
    let analytic = {
        let mut g = Graph::with_params(&store, true, dropout_seed);
        let out = model.pretrain_loss(&mut g, &batch, &hv, &negatives)?;
        g.backward(out.loss).into_params()
    };
    check_params(&store, &analytic, per_param, step, floor, &mut rng, loss)
}
