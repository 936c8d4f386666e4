//! Offline metrics: normalized entropy, pairwise accuracy and uplift.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{default_feedback_factors, ImpressionPair, UserSequence, FACTOR_CLASSES, NUM_FACTORS};
use crate::error::{ArgusError, Result};
use crate::world::World;

/// Mean of `1 / 0.5 / 0` over pairs as `score(first)` is greater than,
/// equal to or less than `score(second)`.
pub fn pairwise_accuracy(scores: &[f64], pairs: &[ImpressionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ArgusError::NoPairs("pairwise accuracy over an empty pair set".into()));
    }
    let mut acc = 0.0;
    for p in pairs {
        let (a, b) = (scores[p.first], scores[p.second]);
        acc += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
    }
    Ok(acc / pairs.len() as f64)
}

/// Relative PA change in percent.
pub fn pau(pa_model: f64, pa_baseline: f64) -> Result<f64> {
    if pa_baseline <= 0.0 {
        return Err(ArgusError::Config(format!("baseline PA {pa_baseline} must be positive")));
    }
    Ok((pa_model - pa_baseline) / pa_baseline * 100.0)
}

/// Model cross-entropy over baseline cross-entropy on the same labels.
/// `probs` holds one predicted distribution per label. Returns `None` when
/// the baseline cross-entropy is zero.
pub fn normalized_entropy(probs: &[Vec<f64>], labels: &[usize], baseline: &[f64]) -> Result<Option<f64>> {
    if probs.len() != labels.len() {
        return Err(ArgusError::Shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let mut model = 0.0;
    let mut base = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() || y >= baseline.len() {
            return Err(ArgusError::Feedback(format!("label {y} out of range")));
        }
        model -= p[y].max(f64::MIN_POSITIVE).ln();
        base -= baseline[y].max(f64::MIN_POSITIVE).ln();
    }
    if base <= 0.0 {
        log::warn!("degenerate baseline distribution; normalized entropy skipped");
        return Ok(None);
    }
    Ok(Some(model / base))
}

/// Ratio of summed losses, `None` when the reference sum is not positive.
pub fn loss_ratio(model: f64, reference: f64) -> Option<f64> {
    (reference > 0.0).then(|| model / reference)
}

/// Empirical per-factor class frequencies over a training window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBaseline {
    pub freqs: Vec<Vec<f64>>,
}

impl FeedbackBaseline {
    pub fn from_train(train: &[UserSequence]) -> Self {
        let mut counts: Vec<Vec<f64>> = FACTOR_CLASSES.iter().map(|&c| vec![0.0; c]).collect();
        let mut n = 0.0;
        for it in train.iter().flat_map(|s| &s.interactions) {
            for (k, c) in it.feedback.classes().into_iter().enumerate() {
                counts[k][c] += 1.0;
            }
            n += 1.0;
        }
        let freqs = counts
            .into_iter()
            .map(|c| if n > 0.0 { c.into_iter().map(|x| x / n).collect() } else { vec![1.0 / c.len() as f64; c.len()] })
            .collect();
        Self { freqs }
    }
}

/// Laplace-smoothed unigram distribution over training positives, keyed by
/// item id. Unseen items share one extra pseudo-count.
#[derive(Clone, Debug, PartialEq)]
pub struct Unigram {
    counts: HashMap<String, u64>,
    total: f64,
    n_items: usize,
}

impl Unigram {
    pub fn new<'a>(items: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut total = 0u64;
        for i in items {
            *counts.entry(i.to_string()).or_default() += 1;
            total += 1;
        }
        let n_items = counts.len();
        Self { counts, total: total as f64, n_items }
    }

    pub fn count(&self, item: &str) -> u64 {
        self.counts.get(item).copied().unwrap_or(0)
    }

    pub fn log_prob(&self, item: &str) -> f64 {
        ((self.count(item) as f64 + 1.0) / (self.total + self.n_items as f64 + 1.0)).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Popularity,
    OracleRelevance,
    Constant,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Popularity => "popularity",
            Self::OracleRelevance => "oracle-relevance",
            Self::Constant => "constant",
        }
    }
}

/// A holdout impression as seen by baseline scorers.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImpression {
    pub user_id: String,
    pub ts: i64,
    pub item_id: String,
    pub score: f64,
}

/// Scores impressions with a non-learned baseline. `impression_counts` are
/// training-window impression frequencies.
pub fn baseline_scores(
    kind: BaselineKind,
    impressions: &[ScoredImpression],
    impression_counts: &HashMap<String, u64>,
    world: Option<&World>,
) -> Result<Vec<f64>> {
    match kind {
        BaselineKind::Constant => Ok(vec![0.0; impressions.len()]),
        BaselineKind::Popularity => {
            Ok(impressions.iter().map(|i| impression_counts.get(&i.item_id).copied().unwrap_or(0) as f64).collect())
        }
        BaselineKind::OracleRelevance => {
            let w = world.ok_or_else(|| {
                ArgusError::Config("oracle-relevance baseline needs a synthetic dataset with world state".into())
            })?;
            impressions.iter().map(|i| w.oracle_relevance_at(&i.user_id, &i.item_id, i.ts)).collect()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-factor feedback NE in schema order; `None` when skipped.
    pub feedback_ne: Vec<(String, Option<f64>)>,
    pub next_item_ne: Option<f64>,
    pub pa: Option<f64>,
    pub baseline: String,
    pub pa_baseline: Option<f64>,
    pub pau: Option<f64>,
    /// PA of every available baseline scorer.
    pub baseline_pa: Vec<(String, f64)>,
    pub n_pairs: usize,
    /// Next-item targets scored.
    pub n_targets: usize,
    pub n_users: usize,
    pub n_impressions: usize,
    pub eval_uniform_negatives: usize,
    pub eval_inbatch_negatives: usize,
    pub config_digest: String,
    pub seed: u64,
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl MetricsReport {
    pub fn factor_names() -> Vec<String> {
        default_feedback_factors().into_iter().map(|f| f.name).collect()
    }

    pub fn feedback(&self, factor: &str) -> Option<f64> {
        self.feedback_ne.iter().find(|(n, _)| n == factor).and_then(|(_, v)| *v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table: feedback NE columns, next-item NE, PA and
    /// PAU, followed by counts.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = self.feedback_ne.iter().map(|(n, _)| format!("NE {n}")).collect();
        header.extend(["NE next-item".into(), "PA".into(), format!("PA {}", self.baseline), "PAU %".into()]);
        let mut row: Vec<String> = self.feedback_ne.iter().map(|(_, v)| fmt_opt(*v, 4)).collect();
        row.extend([
            fmt_opt(self.next_item_ne, 4),
            fmt_opt(self.pa, 4),
            fmt_opt(self.pa_baseline, 4),
            self.pau.map_or_else(|| "-".into(), |v| format!("{v:+.2}")),
        ]);
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(&header));
        let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        let _ = writeln!(out, "{}", line(&row));
        let _ = writeln!(out);
        for (name, pa) in &self.baseline_pa {
            let _ = writeln!(out, "{:<30}{pa:.4}", format!("PA baseline {name}"));
        }
        let counts = [
            ("pairs", self.n_pairs.to_string()),
            ("next-item targets", self.n_targets.to_string()),
            ("users", self.n_users.to_string()),
            ("impressions", self.n_impressions.to_string()),
            (
                "eval negatives",
                format!("{} uniform + {} in-batch", self.eval_uniform_negatives, self.eval_inbatch_negatives),
            ),
            ("config digest", self.config_digest.clone()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in counts {
            let _ = writeln!(out, "{k:<30}{v}");
        }
        out
    }
}

/// Feedback NE for every factor from per-target predicted distributions.
pub fn feedback_ne(
    probs: &[Vec<Vec<f64>>; NUM_FACTORS],
    labels: &[Vec<usize>; NUM_FACTORS],
    baseline: &FeedbackBaseline,
) -> Result<Vec<(String, Option<f64>)>> {
    MetricsReport::factor_names()
        .into_iter()
        .enumerate()
        .map(|(k, name)| Ok((name, normalized_entropy(&probs[k], &labels[k], &baseline.freqs[k])?)))
        .collect()
}
