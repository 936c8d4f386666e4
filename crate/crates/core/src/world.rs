//! Synthetic user-behaviour world.
//!
//! Users and items carry unit latent vectors; relevance is their inner
//! product. Item popularity follows a Zipf law and popular items lean towards
//! the population's mean taste, so popularity is informative but not
//! personal. Two behaviours produce events:
//!
//! * organic: the user picks an item with probability proportional to
//!   `exp(relevance / noise_temperature)`;
//! * recommended: a logging policy samples `policy_candidates` items by
//!   popularity and shows one with probability proportional to
//!   `exp(relevance / policy_temperature)` among them (an impression).
//!
//! Feedback depends on relevance only. User tastes drift linearly in time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, splitmix64};
use crate::data::{DatasetHeader, EventRecord, SurfaceSet};
use crate::error::{ArgusError, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_days: u32,
    pub latent_dim: usize,
    pub zipf_exponent: f64,
    /// Probability that an event happens on an organic surface.
    pub organic_fraction: f64,
    /// Poisson mean of sessions per user per day.
    pub sessions_per_day: f64,
    /// Mean number of events per session (at least one).
    pub session_len_mean: f64,
    /// Temperature of organic choice; small values make users pick their
    /// most relevant items.
    pub noise_temperature: f64,
    pub policy_temperature: f64,
    pub policy_candidates: usize,
    /// How strongly users align with the mean taste.
    pub taste_alignment: f64,
    /// Pull of the most popular item towards the mean taste; falls linearly
    /// to zero along the popularity ranking.
    pub head_alignment: f64,
    /// Drift of user latents per simulated day.
    pub drift_rate: f64,
    pub feedback_sharpness: f64,
    pub like_bias: f64,
    pub skip_bias: f64,
    pub listen_bias: f64,
    pub surfaces: SurfaceSet,
    pub devices: Vec<String>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 5000,
            n_days: 60,
            latent_dim: 8,
            zipf_exponent: 1.0,
            organic_fraction: 0.7,
            sessions_per_day: 1.5,
            session_len_mean: 7.0,
            noise_temperature: 0.03,
            policy_temperature: 2.0,
            policy_candidates: 24,
            taste_alignment: 0.6,
            head_alignment: 1.5,
            drift_rate: 0.01,
            feedback_sharpness: 4.0,
            like_bias: -1.5,
            skip_bias: -0.5,
            listen_bias: -1.0,
            surfaces: SurfaceSet::default(),
            devices: vec!["mobile".into(), "desktop".into(), "speaker".into()],
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ArgusError::Config(format!("world: {m}")));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be positive");
        }
        if !(0.0..=1.0).contains(&self.organic_fraction) {
            return bad("organic_fraction must lie in [0, 1]");
        }
        if !(self.noise_temperature > 0.0) || !(self.policy_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.sessions_per_day < 0.0 || self.session_len_mean < 1.0 {
            return bad("sessions_per_day >= 0 and session_len_mean >= 1 required");
        }
        if self.policy_candidates == 0 {
            return bad("policy_candidates must be at least 1");
        }
        if self.drift_rate < 0.0 {
            return bad("drift_rate must be non-negative");
        }
        if self.surfaces.organic.is_empty() && self.organic_fraction > 0.0
            || self.surfaces.recommended.is_empty() && self.organic_fraction < 1.0
        {
            return bad("surface lists must cover the configured mix");
        }
        if self.devices.is_empty() {
            return bad("at least one device required");
        }
        Ok(())
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            surfaces: self.surfaces.clone(),
            devices: self.devices.clone(),
            seed: self.seed,
            n_days: self.n_days,
            world: Some(serde_json::to_value(self).expect("world config serializes")),
            ..DatasetHeader::default()
        }
    }
}

/// Ground-truth latent state of a world.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub dim: usize,
    /// Row-major `n_users x dim` unit vectors at day 0.
    pub user_base: Vec<f64>,
    /// Row-major `n_users x dim` unit drift directions.
    pub user_drift: Vec<f64>,
    pub item_latent: Vec<f64>,
    /// Item popularity weights; sum to 1.
    pub popularity: Vec<f64>,
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

fn parse_id(id: &str, prefix: char, n: usize) -> Result<usize> {
    id.strip_prefix(prefix)
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i < n)
        .ok_or_else(|| ArgusError::UnknownId(id.to_string()))
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalized(v)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index into a cumulative weight table.
fn sample_cdf(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cdf.last().expect("non-empty cdf");
    let x = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

pub struct World {
    pub config: WorldConfig,
    pub latent: LatentState,
    popularity_cdf: Vec<f64>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed));
        let mean_taste = random_unit(&mut rng, dim);

        let weights: Vec<f64> = (0..config.n_items).map(|i| ((i + 1) as f64).powf(-config.zipf_exponent)).collect();
        let total: f64 = weights.iter().sum();
        let popularity: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let mut item_latent = Vec::with_capacity(config.n_items * dim);
        for i in 0..config.n_items {
            let head = 1.0 - i as f64 / config.n_items as f64;
            let pull = config.head_alignment * head;
            let z = random_unit(&mut rng, dim);
            let v: Vec<f64> = z.iter().zip(&mean_taste).map(|(a, m)| a + pull * m).collect();
            item_latent.extend(normalized(v));
        }
        let mut user_base = Vec::with_capacity(config.n_users * dim);
        let mut user_drift = Vec::with_capacity(config.n_users * dim);
        for _ in 0..config.n_users {
            let z = random_unit(&mut rng, dim);
            let v: Vec<f64> = z.iter().zip(&mean_taste).map(|(a, m)| a + config.taste_alignment * m).collect();
            user_base.extend(normalized(v));
            user_drift.extend(random_unit(&mut rng, dim));
        }
        let mut acc = 0.0;
        let popularity_cdf = popularity
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { config, latent: LatentState { dim, user_base, user_drift, item_latent, popularity }, popularity_cdf })
    }

    pub fn item_latent(&self, item: usize) -> &[f64] {
        let d = self.latent.dim;
        &self.latent.item_latent[item * d..(item + 1) * d]
    }

    /// User latent at a (fractional) day.
    pub fn user_latent(&self, user: usize, day: f64) -> Vec<f64> {
        let d = self.latent.dim;
        let base = &self.latent.user_base[user * d..(user + 1) * d];
        let drift = &self.latent.user_drift[user * d..(user + 1) * d];
        let shift = self.config.drift_rate * day;
        normalized(base.iter().zip(drift).map(|(b, w)| b + shift * w).collect())
    }

    /// Ground-truth relevance at day 0.
    pub fn oracle_relevance(&self, user_id: &str, item_id: &str) -> Result<f64> {
        self.oracle_relevance_at(user_id, item_id, 0)
    }

    /// Ground-truth relevance with the user's taste at timestamp `ts`.
    pub fn oracle_relevance_at(&self, user_id: &str, item_id: &str, ts: i64) -> Result<f64> {
        let u = parse_id(user_id, 'u', self.config.n_users)?;
        let i = parse_id(item_id, 'i', self.config.n_items)?;
        let day = ts as f64 / SECONDS_PER_DAY as f64;
        Ok(dot(&self.user_latent(u, day), self.item_latent(i)))
    }

    fn sample_feedback(&self, rel: f64, rng: &mut impl Rng) -> (u8, u8, u8) {
        let c = &self.config;
        let a = c.feedback_sharpness * rel;
        let like = rng.random::<f64>() < sigmoid(a + c.like_bias);
        let skip = rng.random::<f64>() < sigmoid(-a + c.skip_bias);
        // P(bucket b) ∝ exp(b · (a + listen_bias) / 2)
        let logits: Vec<f64> = (0..4).map(|b| b as f64 * (a + c.listen_bias) * 0.5).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        let cdf: Vec<f64> = logits
            .iter()
            .map(|l| {
                acc += (l - m).exp();
                acc
            })
            .collect();
        let bucket = sample_cdf(&cdf, rng);
        (like as u8, skip as u8, bucket as u8)
    }

    /// Events of one user over `n_days`, in time order.
    pub fn generate_user(&self, user: usize, n_days: u32) -> Vec<EventRecord> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(c.seed ^ splitmix64(user as u64 + 1)));
        let uid = user_id(user);
        let sessions = Poisson::new(c.sessions_per_day.max(1e-12)).expect("positive mean");
        let extra_len = 1.0 / c.session_len_mean;
        let mut organic_cdf: Vec<f64> = Vec::with_capacity(c.n_items);
        let mut out = Vec::new();
        let mut last_ts = i64::MIN;
        for day in 0..n_days {
            let n_sessions = if c.sessions_per_day > 0.0 { sessions.sample(&mut rng) as usize } else { 0 };
            if n_sessions == 0 {
                continue;
            }
            let taste = self.user_latent(user, day as f64 + 0.5);
            let relevance: Vec<f64> = (0..c.n_items).map(|i| dot(&taste, self.item_latent(i))).collect();
            organic_cdf.clear();
            let mut acc = 0.0;
            let rmax = relevance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in &relevance {
                acc += ((r - rmax) / c.noise_temperature).exp();
                organic_cdf.push(acc);
            }
            let mut starts: Vec<i64> = (0..n_sessions).map(|_| rng.random_range(0..SECONDS_PER_DAY - 7_200)).collect();
            starts.sort_unstable();
            for start in starts {
                let device = c.devices[rng.random_range(0..c.devices.len())].clone();
                // sessions never overlap the previous one
                let mut ts = (day as i64 * SECONDS_PER_DAY + start).max(last_ts.saturating_add(60));
                if ts >= (day as i64 + 1) * SECONDS_PER_DAY {
                    break;
                }
                loop {
                    let organic = rng.random::<f64>() < c.organic_fraction;
                    let (surface, item) = if organic {
                        let s = &c.surfaces.organic[rng.random_range(0..c.surfaces.organic.len())];
                        (s.clone(), sample_cdf(&organic_cdf, &mut rng))
                    } else {
                        let s = &c.surfaces.recommended[rng.random_range(0..c.surfaces.recommended.len())];
                        (s.clone(), self.logging_policy(&relevance, &mut rng))
                    };
                    let (like, skip, listen_bucket) = self.sample_feedback(relevance[item], &mut rng);
                    out.push(EventRecord {
                        user_id: uid.clone(),
                        ts,
                        surface,
                        device: device.clone(),
                        item_id: item_id(item),
                        like,
                        skip,
                        listen_bucket,
                        impression: (!organic) as u8,
                    });
                    last_ts = ts;
                    ts += 60 + rng.random_range(0..240);
                    if rng.random::<f64>() < extra_len || ts >= (day as i64 + 1) * SECONDS_PER_DAY {
                        break;
                    }
                }
            }
        }
        out
    }

    /// Samples candidates by popularity and shows one of them, choosing by
    /// Gumbel-max over `relevance / policy_temperature`.
    fn logging_policy(&self, relevance: &[f64], rng: &mut impl Rng) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for _ in 0..self.config.policy_candidates {
            let i = sample_cdf(&self.popularity_cdf, rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let score = relevance[i] / self.config.policy_temperature - (-u.ln()).ln();
            if score > best.0 {
                best = (score, i);
            }
        }
        best.1
    }

    /// The full log for `n_days`, grouped by user in id order.
    pub fn generate(&self, n_days: u32) -> Vec<EventRecord> {
        (0..self.config.n_users).flat_map(|u| self.generate_user(u, n_days)).collect()
    }
}

/// Builds the world for `config` and returns its event log.
pub fn generate(config: &WorldConfig, n_days: u32) -> Result<Vec<EventRecord>> {
    Ok(World::new(config.clone())?.generate(n_days))
}
