//! Hyper-parameters shared by training, evaluation and the command line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NegativePoolKind, TemporalGraph};
use crate::memory::MemoryUnit;

/// Memory width used for datasets without edge features.
pub const DEFAULT_DIM: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestarterKind {
    None,
    Static,
    #[default]
    Transformer,
}

impl RestarterKind {
    pub fn name(self) -> &'static str {
        match self {
            RestarterKind::None => "none",
            RestarterKind::Static => "static",
            RestarterKind::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for RestarterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "static" => Ok(Self::Static),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::Config(format!("unknown restarter {other:?} (expected none, static or transformer)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Memory and embedding width; `None` picks the edge feature width, or
    /// [`DEFAULT_DIM`] when events carry no features.
    pub memory_dim: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    pub neighbors: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    #[serde(alias = "p_r")]
    pub restart_prob: f64,
    pub restarter: RestarterKind,
    /// Truncated history length `m` seen by the Transformer restarter.
    pub history: usize,
    pub restarter_layers: usize,
    pub restarter_heads: usize,
    pub msg_source: MemoryUnit,
    pub upd_source: MemoryUnit,
    pub workers: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub negative_pool: NegativePoolKind,
    /// Chronological split fractions of the whole stream.
    pub train_split: f64,
    pub val_split: f64,
    /// Fraction of the training split actually trained on, taken from its
    /// most recent end.
    pub train_subset: f64,
    pub unseen_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            memory_dim: None,
            layers: 1,
            heads: 2,
            neighbors: 10,
            dropout: 0.1,
            batch_size: 200,
            learning_rate: 1e-4,
            epochs: 10,
            patience: 3,
            restart_prob: 0.01,
            restarter: RestarterKind::Transformer,
            history: 40,
            restarter_layers: 1,
            restarter_heads: 2,
            msg_source: MemoryUnit::Minus,
            upd_source: MemoryUnit::Plus,
            workers: 1,
            seed: 0,
            eval_seed: 1,
            negative_pool: NegativePoolKind::Destinations,
            train_split: 0.7,
            val_split: 0.15,
            train_subset: 1.0,
            unseen_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if !(0.0..=1.0).contains(&self.restart_prob) {
            return bad("restart_prob", &format!("{} is outside [0, 1]", self.restart_prob));
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.layers == 0 || self.neighbors == 0 || self.history == 0 || self.restarter_layers == 0 {
            return bad("layers/neighbors/history", "must be positive");
        }
        if self.heads == 0 || self.restarter_heads == 0 {
            return bad("heads", "must be positive");
        }
        if self.memory_dim == Some(0) {
            return bad("memory_dim", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.unseen_frac) {
            return bad("unseen_frac", "must be in [0, 1]");
        }
        if !(self.train_split > 0.0 && self.val_split > 0.0 && self.train_split + self.val_split < 1.0) {
            return bad("train_split/val_split", "need 0 < train, 0 < val, train + val < 1");
        }
        if !(self.train_subset > 0.0 && self.train_subset <= 1.0) {
            return bad("train_subset", &format!("{} is outside (0, 1]", self.train_subset));
        }
        Ok(())
    }

    /// The most recent `train_subset` share of the training split.
    pub fn training_range(&self, g: &TemporalGraph) -> std::ops::Range<usize> {
        let r = g.split_range(crate::graph::Split::Train);
        let keep = ((r.len() as f64) * self.train_subset).round() as usize;
        r.end - keep.min(r.len())..r.end
    }

    pub fn dim_for(&self, g: &TemporalGraph) -> usize {
        self.memory_dim.unwrap_or(if g.edge_dim() > 0 { g.edge_dim() } else { DEFAULT_DIM })
    }

    /// Hex SHA-256 of the JSON form; embedded in every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::graph::hex_digest(&json)
    }
}
