//! Run configuration: a single JSON document where every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ArgusError, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, LrSchedule};
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub events: PathBuf,
    pub header: PathBuf,
    /// Length of the evaluation window following the training period.
    pub holdout_days: u32,
    /// Start of the evaluation window; defaults to `holdout_days` before the
    /// end of the generated period.
    pub cutoff_ts: Option<i64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            events: PathBuf::from("data/events.jsonl"),
            header: PathBuf::from("data/header.json"),
            holdout_days: 7,
            cutoff_ts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_uniform: usize,
    pub n_inbatch: usize,
    pub eval_uniform: usize,
    pub eval_inbatch: usize,
    pub sketch_depth: usize,
    pub sketch_width: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_uniform: 128,
            n_inbatch: 128,
            eval_uniform: 512,
            eval_inbatch: 512,
            sketch_depth: 4,
            sketch_width: 1 << 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Minimum age of a user state relative to the impression it scores.
    pub latency: i64,
    /// Impressions at most `pair_window - 1` apart form pairs.
    pub pair_window: usize,
    pub listen_tiebreak: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { latency: 86_400, pair_window: 2, listen_tiebreak: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Chunks per pre-training step (full scale: 4096).
    pub batch_size: usize,
    /// Chunks per fine-tuning step (full scale: 2048).
    pub finetune_batch_size: usize,
    /// Pre-training chunk length (full scale: 512).
    pub pretrain_len: usize,
    /// Fine-tuning chunk length and scoring context (full scale: 2048).
    pub finetune_len: usize,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    /// Stop after this many steps; `None` runs the full epoch.
    pub max_steps: Option<u64>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            finetune_batch_size: 32,
            pretrain_len: 128,
            finetune_len: 512,
            adam: AdamConfig::default(),
            schedule: LrSchedule::default(),
            max_steps: None,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            deterministic: true,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            sampling: SamplingConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn sha256_json<T: Serialize>(v: &T) -> Result<String> {
    let s = serde_json::to_vec(v)?;
    Ok(hex::encode(Sha256::digest(&s)))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.world.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArgusError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies a seed override; the world generator follows the run seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.finetune_batch_size == 0 {
            return Err(ArgusError::Config("batch sizes must be positive".into()));
        }
        if t.pretrain_len < 2 || t.finetune_len < 2 {
            return Err(ArgusError::Config("sequence lengths must be at least 2".into()));
        }
        let max_len = self.model.encoder.max_len;
        if t.pretrain_len > max_len || t.finetune_len > max_len {
            return Err(ArgusError::Config(format!(
                "sequence lengths {} / {} exceed encoder max_len {max_len}",
                t.pretrain_len, t.finetune_len
            )));
        }
        if self.loss.pair_window < 2 {
            return Err(ArgusError::Config("pair_window must be at least 2".into()));
        }
        if self.sampling.n_uniform + self.sampling.n_inbatch == 0 {
            return Err(ArgusError::Config("at least one negative per step is required".into()));
        }
        if self.sampling.sketch_depth == 0 || self.sampling.sketch_width == 0 {
            return Err(ArgusError::Config("sketch dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Digest of everything that affects results; output and data paths are
    /// excluded so identical runs in different directories agree.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data.events = PathBuf::new();
        c.data.header = PathBuf::new();
        sha256_json(&c)
    }

    /// Digest of the parameter layout; checkpoints are only interchangeable
    /// between configs that agree on it.
    pub fn architecture_digest(&self) -> Result<String> {
        let m = &self.model;
        let e = &m.encoder;
        sha256_json(&serde_json::json!({
            "layers": e.n_layers,
            "width": e.width,
            "heads": e.n_heads,
            "ff_mult": e.ff_mult,
            "max_len": e.max_len,
            "embedding": m.embedding,
            "output_dim": m.output_dim(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn partial_override() {
        let c = RunConfig::from_json(r#"{"seed": 7, "train": {"batch_size": 8}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.world.seed, 7);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.pretrain_len, 128);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.architecture_digest().unwrap(), b.architecture_digest().unwrap());
    }

    #[test]
    fn round_trip() {
        let a = RunConfig::default();
        let b = RunConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
