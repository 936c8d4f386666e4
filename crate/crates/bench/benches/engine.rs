use argus_core::data::chunk_sequences;
use argus_core::encoder::{Encoder, EncoderConfig};
use argus_core::model::PackedBatch;
use argus_core::pipeline::{self, Dataset};
use argus_core::sampling::{draw_negatives, item_key};
use argus_core::{CountMinSketch, Graph, ParamStore, RunConfig, Segment, Tensor};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sketch(c: &mut Criterion) {
    let keys: Vec<u64> = (0..10_000u64).map(|i| item_key(&format!("i{}", i % 500))).collect();
    c.bench_function("sketch/insert_10k", |b| {
        b.iter_batched(
            || CountMinSketch::new(4, 1024, 1).unwrap(),
            |mut s| {
                for &k in &keys {
                    s.insert(k);
                }
                s
            },
            BatchSize::SmallInput,
        )
    });
    let mut s = CountMinSketch::new(4, 1024, 1).unwrap();
    keys.iter().for_each(|&k| s.insert(k));
    c.bench_function("sketch/log_q_10k", |b| b.iter(|| keys.iter().map(|&k| s.log_q(k).unwrap()).sum::<f64>()));
}

fn encoder(c: &mut Criterion) {
    for (name, cfg) in [("mini", EncoderConfig::mini_desk()), ("small", EncoderConfig::small_desk())] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::register(&cfg, &mut store, &mut rng).unwrap();
        let segments: Vec<Segment> = (0..4).map(|i| Segment { start: 64 * i, len: 64 }).collect();
        let data: Vec<f32> = (0..256 * cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[256, cfg.width], data).unwrap();
        c.bench_function(&format!("encoder/{name}/forward_4x64"), |b| {
            b.iter(|| {
                let mut g = Graph::with_params(&store, false, 0);
                let xv = g.constant(x.clone());
                let h = enc.forward(&mut g, xv, &segments).unwrap();
                g.value(h).item()
            })
        });
        c.bench_function(&format!("encoder/{name}/forward_backward_4x64"), |b| {
            b.iter(|| {
                let mut g = Graph::with_params(&store, true, 0);
                let xv = g.constant(x.clone());
                let h = enc.forward(&mut g, xv, &segments).unwrap();
                let l = g.sum(h);
                g.backward(l)
            })
        });
    }
}

fn pretrain_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.events = dir.path().join("events.jsonl");
    cfg.data.header = dir.path().join("header.json");
    cfg.world.n_users = 100;
    cfg.world.n_days = 14;
    cfg.data.holdout_days = 4;
    pipeline::generate(&cfg).unwrap();
    let data = Dataset::load(&cfg).unwrap();
    let (model, store) = pipeline::build_model(&cfg, None).unwrap();
    let chunks = chunk_sequences(&data.split.train, cfg.train.pretrain_len);
    let n = cfg.train.batch_size.min(chunks.len());
    let pb = PackedBatch::new(&chunks[..n], &data.hv);
    let sketch = data.train_sketch(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let negs = draw_negatives(
        &pb.target_items(),
        &data.catalog,
        cfg.sampling.n_uniform,
        cfg.sampling.n_inbatch,
        &sketch,
        |x| data.keys[x as usize],
        &mut rng,
    )
    .unwrap();
    let mut group = c.benchmark_group("pretrain");
    group.sample_size(10);
    group.bench_function("mini_step", |b| {
        b.iter(|| {
            let mut g = Graph::with_params(&store, true, 1);
            let out = model.pretrain_loss(&mut g, &pb, &data.hv, &negs).unwrap();
            g.backward(out.loss)
        })
    });
    group.finish();
}

criterion_group!(benches, sketch, encoder, pretrain_step);
criterion_main!(benches);
