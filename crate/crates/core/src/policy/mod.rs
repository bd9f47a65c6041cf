//! Recurrent augmentation policy and its frozen snapshots.

mod net;
mod snapshot;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::DEFAULT_N_TAU;
use crate::error::{Error, Result};

pub use net::{PolicyNet, SampledPair, Unrolled, NUM_OPS};
pub use snapshot::{PolicySnapshot, SNAPSHOT_VERSION};

/// Whether view 2 is conditioned on the actions emitted for view 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    CoViews,
    IndepViews,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CoViews => "coviews",
            Self::IndepViews => "indepviews",
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coviews" => Ok(Self::CoViews),
            "indepviews" => Ok(Self::IndepViews),
            _ => Err(Error::Parse(format!("unknown policy mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    pub n_tau: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Standard deviation of the embedding tables and start token.
    /// Large inputs behind small input weights: the initial hidden state is
    /// near zero, yet small weight steps move the gate pre-activations far.
    pub embed_init: f64,
    /// Input weights are uniform in `±input_init/√(2·embed)`.
    pub input_init: f64,
    /// Heads are uniform in `±head_init`; zero gives an exactly uniform policy.
    pub head_init: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::CoViews,
            n_tau: DEFAULT_N_TAU,
            hidden: 64,
            embed: 16,
            embed_init: 6.0,
            input_init: 0.05,
            head_init: 0.4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tau == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(Error::Config(
                "policy n_tau, hidden and embed must be positive".into(),
            ));
        }
        for (name, v) in [
            ("embed_init", self.embed_init),
            ("input_init", self.input_init),
            ("head_init", self.head_init),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("policy {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `(op index, bin)` actions already emitted within one pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionHistory {
    actions: Vec<(usize, usize)>,
}

impl ActionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_actions(actions: Vec<(usize, usize)>) -> Self {
        Self { actions }
    }

    pub fn push(&mut self, op: usize, bin: usize) {
        self.actions.push((op, bin));
    }

    pub fn actions(&self) -> &[(usize, usize)] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
