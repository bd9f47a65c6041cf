//! Records written to a run's `metrics.jsonl`, one JSON object per line.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ppo::PpoEpochStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Train,
    Search,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Train => "train",
            Phase::Search => "search",
        })
    }
}

/// Search records precede the training record of the same epoch, so epochs
/// are nondecreasing along the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean batch InfoNCE of the epoch; for searches, the normalizer in use.
    pub mean_infonce: f64,
    /// Last learning rate of the epoch; PPO learning rate for searches.
    pub lr: f64,
    /// `random`, or the label of the newest queued policy.
    pub active_policy_id: String,
    pub queue_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppo: Option<Vec<PpoEpochStats>>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }
}
