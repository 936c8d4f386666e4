//! Interaction records, event-log I/O, chunking, temporal split and
//! impression-pair construction.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};

/// Interned string handle into a [`Vocab`].
pub type Sym = u32;

/// String interner shared by every categorical field of a dataset.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, Sym>,
}

impl Vocab {
    pub fn intern(&mut self, s: &str) -> Sym {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.names.len() as Sym;
        self.names.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    pub fn get(&self, s: &str) -> Option<Sym> {
        self.index.get(s).copied()
    }

    pub fn name(&self, id: Sym) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One categorical feedback factor and its number of classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackFactor {
    pub name: String,
    pub classes: usize,
}

/// Default schema: like {0,1}, skip {0,1}, listen_bucket {0..3}.
pub fn default_feedback_factors() -> Vec<FeedbackFactor> {
    vec![
        FeedbackFactor { name: "like".into(), classes: 2 },
        FeedbackFactor { name: "skip".into(), classes: 2 },
        FeedbackFactor { name: "listen_bucket".into(), classes: 4 },
    ]
}

pub const NUM_FACTORS: usize = 3;
pub const FACTOR_CLASSES: [usize; NUM_FACTORS] = [2, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Feedback {
    pub like: u8,
    pub skip: u8,
    pub listen_bucket: u8,
}

impl Feedback {
    pub fn new(like: u8, skip: u8, listen_bucket: u8) -> Result<Self> {
        let f = Self { like, skip, listen_bucket };
        for (k, (&c, &n)) in f.classes().iter().zip(&FACTOR_CLASSES).enumerate() {
            if c >= n {
                return Err(ArgusError::Feedback(format!("factor {k} value {c} outside 0..{n}")));
            }
        }
        Ok(f)
    }

    /// Observed class per factor, in schema order.
    pub fn classes(&self) -> [usize; NUM_FACTORS] {
        [self.like as usize, self.skip as usize, self.listen_bucket as usize]
    }

    /// Ordering used for impression pairs: 2 if liked, else 1 if not
    /// skipped, else 0. With `listen_tiebreak` the listen bucket breaks ties.
    pub fn rank(&self, listen_tiebreak: bool) -> u32 {
        let base = if self.like == 1 {
            2
        } else if self.skip == 0 {
            1
        } else {
            0
        };
        if listen_tiebreak {
            base * 4 + self.listen_bucket as u32
        } else {
            base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub ts: i64,
    pub surface: Sym,
    pub device: Sym,
    pub item: Sym,
    pub feedback: Feedback,
    pub is_impression: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
}

/// Surfaces split by whether the system recommended the item there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceSet {
    pub organic: Vec<String>,
    pub recommended: Vec<String>,
}

impl Default for SurfaceSet {
    fn default() -> Self {
        Self { organic: vec!["search".into(), "library".into()], recommended: vec!["feed".into(), "radio".into()] }
    }
}

impl SurfaceSet {
    pub fn is_recommended(&self, surface: &str) -> bool {
        self.recommended.iter().any(|s| s == surface)
    }
}

/// Sidecar header describing a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub k: usize,
    pub factors: Vec<FeedbackFactor>,
    pub surfaces: SurfaceSet,
    pub devices: Vec<String>,
    pub seed: u64,
    pub n_days: u32,
    /// Generator configuration, present for synthetic datasets.
    #[serde(default)]
    pub world: Option<serde_json::Value>,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            k: NUM_FACTORS,
            factors: default_feedback_factors(),
            surfaces: SurfaceSet::default(),
            devices: vec!["mobile".into(), "desktop".into(), "speaker".into()],
            seed: 0,
            n_days: 0,
            world: None,
        }
    }
}

impl DatasetHeader {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArgusError::io(path, e))?;
        let h: Self = serde_json::from_str(&text)?;
        if h.k != h.factors.len() || h.factors.iter().map(|f| f.classes).collect::<Vec<_>>() != FACTOR_CLASSES {
            return Err(ArgusError::Feedback(format!("unsupported feedback schema {:?}", h.factors)));
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| ArgusError::io(path, e))
    }
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub ts: i64,
    pub surface: String,
    pub device: String,
    pub item_id: String,
    pub like: u8,
    pub skip: u8,
    pub listen_bucket: u8,
    pub impression: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: usize,
    pub malformed: usize,
}

/// Parsed event log.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    pub vocab: Vocab,
    pub sequences: Vec<UserSequence>,
    pub stats: LoadStats,
}

impl EventLog {
    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.interactions.len()).sum()
    }
}

/// Share of malformed lines above which loading fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

fn parse_line(line: &str, surfaces: &SurfaceSet) -> std::result::Result<EventRecord, String> {
    let rec: EventRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.ts < 0 {
        return Err(format!("negative timestamp {}", rec.ts));
    }
    if rec.impression > 1 {
        return Err(format!("impression flag {}", rec.impression));
    }
    Feedback::new(rec.like, rec.skip, rec.listen_bucket).map_err(|e| e.to_string())?;
    if (rec.impression == 1) != surfaces.is_recommended(&rec.surface) {
        return Err(format!("impression flag {} disagrees with surface {:?}", rec.impression, rec.surface));
    }
    Ok(rec)
}

/// Reads an event log, groups events by user (ordered by user id) and sorts
/// each user's events by timestamp, keeping input order among equal
/// timestamps.
pub fn load_events(path: &Path, surfaces: &SurfaceSet) -> Result<EventLog> {
    let file = File::open(path).map_err(|e| ArgusError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut vocab = Vocab::default();
    let mut users: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    let mut stats = LoadStats::default();
    let mut first_bad: Option<(usize, String)> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ArgusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_line(&line, surfaces) {
            Ok(rec) => {
                let it = Interaction {
                    ts: rec.ts,
                    surface: vocab.intern(&rec.surface),
                    device: vocab.intern(&rec.device),
                    item: vocab.intern(&rec.item_id),
                    feedback: Feedback { like: rec.like, skip: rec.skip, listen_bucket: rec.listen_bucket },
                    is_impression: rec.impression == 1,
                };
                users.entry(rec.user_id).or_default().push(it);
            }
            Err(e) => {
                stats.malformed += 1;
                first_bad.get_or_insert((n + 1, e));
            }
        }
    }
    if stats.malformed > 0 {
        let (first_line, first_error) = first_bad.unwrap_or_default();
        if stats.malformed as f64 > MAX_MALFORMED_FRACTION * stats.lines as f64 {
            return Err(ArgusError::MalformedEvents {
                malformed: stats.malformed,
                total: stats.lines,
                first_line,
                first_error,
            });
        }
        log::warn!(
            "{}: skipped {} malformed of {} lines (first at line {first_line}: {first_error})",
            path.display(),
            stats.malformed,
            stats.lines
        );
    }
    let sequences = users
        .into_iter()
        .map(|(user_id, mut interactions)| {
            interactions.sort_by_key(|i| i.ts);
            UserSequence { user_id, interactions }
        })
        .collect();
    Ok(EventLog { vocab, sequences, stats })
}

pub fn to_record(user_id: &str, it: &Interaction, vocab: &Vocab) -> EventRecord {
    EventRecord {
        user_id: user_id.to_string(),
        ts: it.ts,
        surface: vocab.name(it.surface).to_string(),
        device: vocab.name(it.device).to_string(),
        item_id: vocab.name(it.item).to_string(),
        like: it.feedback.like,
        skip: it.feedback.skip,
        listen_bucket: it.feedback.listen_bucket,
        impression: it.is_impression as u8,
    }
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a EventRecord>) -> Result<()> {
    let file = File::create(path).map_err(|e| ArgusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| ArgusError::io(path, e))?;
    }
    w.flush().map_err(|e| ArgusError::io(path, e))
}

pub fn write_events(path: &Path, log: &EventLog) -> Result<()> {
    let records: Vec<EventRecord> = log
        .sequences
        .iter()
        .flat_map(|s| s.interactions.iter().map(|it| to_record(&s.user_id, it, &log.vocab)))
        .collect();
    write_records(path, &records)
}

/// A contiguous run of one user's interactions.
///
/// The first `n_context` interactions are inputs only; the rest are
/// prediction targets.
#[derive(Clone, Copy, Debug)]
pub struct Chunk<'a> {
    pub user_id: &'a str,
    pub events: &'a [Interaction],
    pub n_context: usize,
}

impl<'a> Chunk<'a> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn targets(&self) -> std::ops::Range<usize> {
        self.n_context..self.events.len()
    }
}

/// Non-overlapping fixed-length chunks; a shorter trailing chunk is kept
/// when it has at least two interactions.
pub fn chunk_sequences(seqs: &[UserSequence], chunk_len: usize) -> Vec<Chunk<'_>> {
    assert!(chunk_len >= 2, "chunk_len must be at least 2");
    seqs.iter()
        .flat_map(|s| {
            s.interactions.chunks(chunk_len).filter(|c| c.len() >= 2).map(|events| Chunk {
                user_id: &s.user_id,
                events,
                n_context: 0,
            })
        })
        .collect()
}

/// A user's holdout-window targets preceded by their full earlier history.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutSequence {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
    /// Number of leading pre-cutoff interactions (context only).
    pub n_context: usize,
}

impl HoldoutSequence {
    pub fn targets(&self) -> &[Interaction] {
        &self.interactions[self.n_context..]
    }
}

#[derive(Clone, Debug, Default)]
pub struct TemporalSplit {
    pub train: Vec<UserSequence>,
    pub test: Vec<HoldoutSequence>,
}

/// Train gets `ts < cutoff`; test targets are `cutoff <= ts < cutoff + span`
/// carrying all of the user's pre-cutoff history as frozen context.
pub fn temporal_split(seqs: &[UserSequence], cutoff: i64, holdout_span: i64) -> TemporalSplit {
    let end = cutoff.saturating_add(holdout_span);
    let mut split = TemporalSplit::default();
    for s in seqs {
        let n_before = s.interactions.partition_point(|i| i.ts < cutoff);
        let n_window = s.interactions[n_before..].partition_point(|i| i.ts < end);
        if n_before > 0 {
            split
                .train
                .push(UserSequence { user_id: s.user_id.clone(), interactions: s.interactions[..n_before].to_vec() });
        }
        if n_window > 0 {
            split.test.push(HoldoutSequence {
                user_id: s.user_id.clone(),
                interactions: s.interactions[..n_before + n_window].to_vec(),
                n_context: n_before,
            });
        }
    }
    if split.test.is_empty() {
        log::warn!("temporal split: no interactions in [{cutoff}, {end})");
    }
    split
}

/// Evaluation chunks over a holdout sequence: targets are cut into blocks of
/// at most `max_len / 2` and each block is preceded by the interactions
/// immediately before it, up to `max_len` in total.
pub fn holdout_chunks(seq: &HoldoutSequence, max_len: usize) -> Vec<Chunk<'_>> {
    assert!(max_len >= 2);
    let block = (max_len / 2).max(1);
    let mut out = Vec::new();
    let mut start = seq.n_context;
    while start < seq.interactions.len() {
        let end = (start + block).min(seq.interactions.len());
        let ctx_start = end.saturating_sub(max_len).min(start);
        out.push(Chunk {
            user_id: &seq.user_id,
            events: &seq.interactions[ctx_start..end],
            n_context: start - ctx_start,
        });
        start = end;
    }
    out
}

/// Two impressions of one user; `first` received strictly more positive
/// feedback than `second`. Indices refer to the slice pairs were built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImpressionPair {
    pub first: usize,
    pub second: usize,
}

/// Pairs of impressions at most `window - 1` impressions apart with
/// different feedback rank, oriented positive-first.
pub fn build_impression_pairs(events: &[Interaction], window: usize, listen_tiebreak: bool) -> Vec<ImpressionPair> {
    let imps: Vec<usize> = (0..events.len()).filter(|&i| events[i].is_impression).collect();
    let mut pairs = Vec::new();
    for a in 0..imps.len() {
        for b in a + 1..imps.len().min(a + window.max(1)) {
            let (ia, ib) = (imps[a], imps[b]);
            let (ra, rb) = (events[ia].feedback.rank(listen_tiebreak), events[ib].feedback.rank(listen_tiebreak));
            if ra > rb {
                pairs.push(ImpressionPair { first: ia, second: ib });
            } else if rb > ra {
                pairs.push(ImpressionPair { first: ib, second: ia });
            }
        }
    }
    pairs
}
