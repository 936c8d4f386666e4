//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! Criteria 6-11 drive the `argus` binary end to end on three seeds and take
//! a couple of hours on one core. Set `ARGUS_ACCEPTANCE_DIR` to keep the run
//! directory; set `ARGUS_ACCEPTANCE_QUICK=1` to run only criteria 1-5.
//! `ARGUS_ACCEPTANCE_CONFIG=<file>` replaces the config overrides, e.g. with a
//! tiny world to smoke-test the harness; the thresholds stay the same.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use argus_core::data::ImpressionPair;
use argus_core::gradcheck::{op_suite, pretrain_loss_check, DEFAULT_STEP};
use argus_core::metrics::{normalized_entropy, pairwise_accuracy, pau};
use argus_core::objectives::{align_impressions, finetune_pair_loss, fp_loss, nip_loss};
use argus_core::sampling::{item_key, CountMinSketch};
use argus_core::MetricsReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde_json::{json, Value};

const SEEDS: [u64; 3] = [7, 1, 2];
const BASE_CONFIG: &str = include_str!("data/acceptance.json");

struct Verdicts(Vec<bool>);

impl Verdicts {
    fn record(&mut self, id: u32, pass: bool, detail: String) {
        self.line(&format!("criterion {id:>2}"), pass, detail);
    }

    fn line(&mut self, label: &str, pass: bool, detail: String) {
        println!("{label}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push(pass);
    }
}

fn criterion_1() -> (bool, String) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0;
    match op_suite(1, DEFAULT_STEP, 1e-5) {
        Ok(ops) => {
            for (name, r) in ops {
                checked += r.checked;
                if r.max_rel_error > worst {
                    worst = r.max_rel_error;
                    worst_name = name;
                }
            }
        }
        Err(e) => return (false, format!("op suite error: {e}")),
    }
    match pretrain_loss_check(3, 2, 16, 8, 48, DEFAULT_STEP, 1e-5) {
        Ok(r) => {
            checked += r.checked;
            if r.max_rel_error > worst {
                worst = r.max_rel_error;
                worst_name = "pretrain_loss".into();
            }
        }
        Err(e) => return (false, format!("pretrain loss check error: {e}")),
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && secs < 60.0,
        format!("max rel error {worst:.2e} ({worst_name}) over {checked} coordinates in {secs:.1}s"),
    )
}

fn criterion_2() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zipf = Zipf::new(50.0, 1.1).unwrap();
    let mut under = 0;
    for s in 0..100 {
        let stream: Vec<u64> = (0..10_000).map(|_| item_key(&format!("k{}", zipf.sample(&mut rng) as u64))).collect();
        let mut sketch = CountMinSketch::new(4, 1024, s).unwrap();
        let mut exact: HashMap<u64, u64> = HashMap::new();
        for &k in &stream {
            sketch.insert(k);
            *exact.entry(k).or_default() += 1;
        }
        under += exact.iter().filter(|(&k, &c)| sketch.estimate(k) < c).count();
    }
    (under == 0, format!("{under} underestimates over 100 streams"))
}

fn criterion_3() -> (bool, String) {
    let ln2 = std::f64::consts::LN_2;
    let soft = (1.0 + (-2.0f64).exp()).ln();
    let l2 = [0.4, 0.4];
    let l4 = [1.5; 4];
    let errs = [
        (nip_loss(0.7, &[0.7], &[0.0]).unwrap() - ln2).abs(),
        (nip_loss(2.0, &[0.0], &[0.0]).unwrap() - soft).abs(),
        (finetune_pair_loss(2.0, 0.0) - soft).abs(),
        (fp_loss(&[&l2, &l2, &l4], &[0, 1, 2]).unwrap() - (ln2 + ln2 + 4f64.ln())).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    (worst <= 1e-9, format!("max deviation {worst:.1e}"))
}

fn criterion_4() -> (bool, String) {
    let p = |first, second| ImpressionPair { first, second };
    let pa =
        pairwise_accuracy(&[0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.5, 0.5], &[p(0, 1), p(2, 3), p(4, 5), p(6, 7)]).unwrap();
    let lift = pau(0.66, 0.60).unwrap();
    let base = [0.2, 0.5, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
    let ne = normalized_entropy(&vec![base.to_vec(); labels.len()], &labels, &base).unwrap().unwrap();
    let mut worst_complement = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 3.0).collect();
        let pairs: Vec<ImpressionPair> =
            (0..rng.random_range(1..30)).map(|_| p(rng.random_range(0..n), rng.random_range(0..n))).collect();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = pairwise_accuracy(&s, &pairs).unwrap() + pairwise_accuracy(&neg, &pairs).unwrap();
        worst_complement = worst_complement.max((sum - 1.0).abs());
    }
    let pass = pa == 0.875 && (lift - 10.0).abs() < 1e-9 && (ne - 1.0).abs() <= 1e-9 && worst_complement < 1e-12;
    (pass, format!("PA {pa}, PAU {lift:+.6}%, NE {ne:.12}, max |PA(s)+PA(-s)-1| {worst_complement:.1e}"))
}

fn criterion_5() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..40);
        let mut states: Vec<i64> = (0..n).map(|_| rng.random_range(0..10_000)).collect();
        states.sort_unstable();
        let imps: Vec<i64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(-100..12_000)).collect();
        let latency = rng.random_range(0..3_000);
        for a in align_impressions(&states, &imps, latency) {
            let brute = states.iter().rposition(|&s| s + latency <= imps[a.impression]);
            compared += 1;
            if a.state != brute {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("{mismatches} mismatches over 1000 instances ({compared} impressions)"))
}

fn merge(into: &mut Value, from: &Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b.clone(),
    }
}

fn write_config(path: &Path, data_dir: &Path, extra: Value) -> PathBuf {
    let text = match std::env::var_os("ARGUS_ACCEPTANCE_CONFIG") {
        Some(p) => std::fs::read_to_string(p).unwrap(),
        None => BASE_CONFIG.to_string(),
    };
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    merge(
        &mut cfg,
        &json!({"data": {"events": data_dir.join("events.jsonl"), "header": data_dir.join("header.json")}}),
    );
    merge(&mut cfg, &extra);
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_path_buf()
}

fn argus(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_argus"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("argus {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

struct Stage<'a> {
    config: &'a Path,
    seed: u64,
    out: PathBuf,
}

impl Stage<'_> {
    fn run(&self, cmd: &str, extra: &[&str]) -> Result<(), String> {
        let seed = self.seed.to_string();
        let mut args = vec![cmd, "--config", self.config.to_str().unwrap(), "--seed", &seed, "--deterministic"];
        args.extend(["--out-dir", self.out.to_str().unwrap()]);
        args.extend(extra);
        argus(&args)
    }

    fn evaluate(&self, ckpt: &str) -> Result<MetricsReport, String> {
        let path = self.out.join(ckpt);
        self.run("evaluate", &["--ckpt", path.to_str().unwrap()])?;
        let text = std::fs::read_to_string(self.out.join("metrics.json")).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

struct SeedRuns {
    pretrain_secs: f64,
    mini: MetricsReport,
    small: MetricsReport,
    tuned: MetricsReport,
    scratch: MetricsReport,
    short: MetricsReport,
    tuned_tail_loss: f64,
    scratch_tail_loss: f64,
}

/// Mean pair loss over the last quarter of fine-tuning steps.
fn tail_loss(log: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(log).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).map(|v| v["loss"].as_f64().unwrap_or(f64::NAN)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let tail = &losses[losses.len() * 3 / 4..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// generate, pre-train, fine-tune from the checkpoint, evaluate.
fn base_pipeline(dir: &Path, seed: u64) -> Result<(f64, MetricsReport, MetricsReport), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let base = write_config(&dir.join("base.json"), &dir.join("data"), json!({}));
    let st = |name: &str| Stage { config: &base, seed, out: dir.join(name) };
    st("data").run("generate", &[])?;
    let start = Instant::now();
    let p = st("mini");
    p.run("pretrain", &[])?;
    let mini = p.evaluate("pretrain.ckpt")?;
    let secs = start.elapsed().as_secs_f64();
    let init = dir.join("mini/pretrain.ckpt");
    let f = st("tuned");
    f.run("finetune", &["--init", init.to_str().unwrap()])?;
    Ok((secs, mini, f.evaluate("finetune.ckpt")?))
}

fn seed_runs(dir: &Path, seed: u64) -> Result<SeedRuns, String> {
    let (pretrain_secs, mini, tuned) = base_pipeline(dir, seed)?;
    let data = dir.join("data");
    let small_cfg = write_config(
        &dir.join("small.json"),
        &data,
        json!({"model": {"encoder": {"n_layers": 4, "width": 128, "n_heads": 4}}}),
    );
    let short_cfg = write_config(&dir.join("short.json"), &data, json!({"train": {"finetune_len": 64}}));
    let base = dir.join("base.json");
    let init = dir.join("mini/pretrain.ckpt");
    let init = init.to_str().unwrap();

    let s = Stage { config: &small_cfg, seed, out: dir.join("small") };
    s.run("pretrain", &[])?;
    let small = s.evaluate("pretrain.ckpt")?;
    let fs = Stage { config: &base, seed, out: dir.join("scratch") };
    fs.run("finetune", &[])?;
    let scratch = fs.evaluate("finetune.ckpt")?;
    let f64_ = Stage { config: &short_cfg, seed, out: dir.join("short") };
    f64_.run("finetune", &["--init", init])?;
    let short = f64_.evaluate("finetune.ckpt")?;
    Ok(SeedRuns {
        pretrain_secs,
        mini,
        small,
        tuned,
        scratch,
        short,
        tuned_tail_loss: tail_loss(&dir.join("tuned/finetune_log.jsonl"))?,
        scratch_tail_loss: tail_loss(&dir.join("scratch/finetune_log.jsonl"))?,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn end_to_end(root: &Path, verdicts: &mut Verdicts) {
    let mut runs = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        match seed_runs(&root.join(format!("seed{seed}")), seed) {
            Ok(r) => {
                println!("  seed {seed}: runs finished in {:.0}s", start.elapsed().as_secs_f64());
                runs.push(r);
            }
            Err(e) => {
                println!("  seed {seed}: {e}");
                for id in 6..=11 {
                    verdicts.record(id, false, format!("pipeline failed on seed {seed}"));
                }
                return;
            }
        }
    }
    let get =
        |f: &dyn Fn(&SeedRuns) -> Option<f64>| -> Vec<f64> { runs.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect() };

    let next = get(&|r| r.mini.next_item_ne);
    let secs: Vec<f64> = runs.iter().map(|r| r.pretrain_secs).collect();
    let factors = MetricsReport::factor_names();
    let mut pass = median(next.clone()) <= 0.95 && secs.iter().all(|&s| s <= 1800.0);
    let mut detail = format!("next-item NE [{}]", fmt(&next));
    for f in &factors {
        let v = get(&|r| r.mini.feedback(f));
        pass &= median(v.clone()) <= 0.97;
        detail += &format!(", {f} NE [{}]", fmt(&v));
    }
    detail += &format!(", pretrain+eval {:.0}s max", secs.iter().cloned().fold(0.0, f64::max));
    verdicts.record(6, pass, detail);

    let small = get(&|r| r.small.next_item_ne);
    verdicts.record(
        7,
        median(small.clone()) <= median(next.clone()),
        format!("L4 H128 NE [{}] vs L2 H64 NE [{}]", fmt(&small), fmt(&next)),
    );

    let tuned = get(&|r| r.tuned.pa);
    let scratch = get(&|r| r.scratch.pa);
    let (mt, ms) = (median(tuned.clone()), median(scratch.clone()));
    verdicts.record(
        8,
        mt >= ms && mt > 0.5 && ms > 0.5,
        format!("PA pre-trained [{}] vs scratch [{}]", fmt(&tuned), fmt(&scratch)),
    );

    let warm: Vec<f64> = runs.iter().map(|r| r.tuned_tail_loss).collect();
    let cold: Vec<f64> = runs.iter().map(|r| r.scratch_tail_loss).collect();
    verdicts.line(
        "fine-tune init",
        median(warm.clone()) < median(cold.clone()),
        format!("final pair loss pre-trained [{}] vs scratch [{}]", fmt(&warm), fmt(&cold)),
    );

    let short = get(&|r| r.short.pa);
    verdicts.record(
        9,
        mt >= median(short.clone()),
        format!("PA context 256 [{}] vs 64 [{}]", fmt(&tuned), fmt(&short)),
    );

    let pop = get(&|r| r.tuned.pa_baseline);
    verdicts.record(
        10,
        mt > median(pop.clone()),
        format!("PA two-tower [{}] vs popularity [{}]", fmt(&tuned), fmt(&pop)),
    );

    let first = &runs[0];
    match base_pipeline(&root.join("rerun7"), SEEDS[0]) {
        Ok((_, mini, tuned)) => {
            let same = mini == first.mini && tuned == first.tuned;
            let scores_a = std::fs::read(root.join("seed7/tuned/scores.tsv")).unwrap_or_default();
            let scores_b = std::fs::read(root.join("rerun7/tuned/scores.tsv")).unwrap_or_default();
            verdicts.record(
                11,
                same && !scores_a.is_empty() && scores_a == scores_b,
                format!("reports identical: {same}, score files identical: {}", scores_a == scores_b),
            );
        }
        Err(e) => verdicts.record(11, false, e),
    }
}

fn main() {
    // the test harness passes filter flags through; there is nothing to filter
    let started = Instant::now();
    let mut verdicts = Verdicts(Vec::new());
    for (id, check) in [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5].into_iter().enumerate() {
        let (pass, detail) = check();
        verdicts.record(id as u32 + 1, pass, detail);
    }
    if std::env::var("ARGUS_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1") {
        println!("criteria 6-11 skipped (ARGUS_ACCEPTANCE_QUICK=1)");
    } else {
        let keep = std::env::var_os("ARGUS_ACCEPTANCE_DIR").map(PathBuf::from);
        let tmp = tempfile::tempdir().unwrap();
        let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
        end_to_end(&root, &mut verdicts);
    }
    let failed = verdicts.0.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        verdicts.0.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
