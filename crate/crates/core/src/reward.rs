//! Bounded InfoNCE reward and the per-epoch loss normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Threshold on the normalized loss, `> 1`.
    pub th: f64,
    /// Tolerance past the threshold before the reward turns negative, `> 0`.
    pub b: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { th: 1.3, b: 0.2 }
    }
}

impl RewardConfig {
    pub fn new(th: f64, b: f64) -> Result<Self> {
        let cfg = Self { th, b };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.th.is_finite() && self.th > 1.0) {
            return Err(Error::Config(format!("reward threshold {} must be > 1", self.th)));
        }
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(Error::Config(format!("reward tolerance {} must be > 0", self.b)));
        }
        Ok(())
    }

    /// Reward as a function of the already normalized loss `L̄`.
    pub fn of_normalized(&self, lbar: f64) -> f64 {
        if lbar < self.th {
            lbar
        } else {
            -(self.th / self.b) * (lbar - (self.th + self.b))
        }
    }
}

/// Reward of a batch loss normalized by the previous epoch's average.
pub fn bounded_reward(loss: f64, avg: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(avg > 0.0) || !avg.is_finite() {
        return Err(Error::TrackerNotPrimed);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch InfoNCE {loss}")));
    }
    Ok(cfg.of_normalized(loss / avg))
}

/// Accumulates batch losses of the running epoch; `rollover` freezes their
/// mean as the normalizer used until the next rollover.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochLossTracker {
    sum: f64,
    count: usize,
    frozen: Option<f64>,
}

impl EpochLossTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, batch_loss: f64) {
        self.sum += batch_loss;
        self.count += 1;
    }

    pub fn rollover(&mut self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyEpoch);
        }
        let avg = self.sum / self.count as f64;
        if !(avg > 0.0) || !avg.is_finite() {
            return Err(Error::NonFinite(format!("epoch average loss {avg}")));
        }
        self.frozen = Some(avg);
        self.sum = 0.0;
        self.count = 0;
        Ok(avg)
    }

    /// Frozen average of the last completed epoch.
    pub fn average(&self) -> Result<f64> {
        self.frozen.ok_or(Error::TrackerNotPrimed)
    }

    pub fn is_primed(&self) -> bool {
        self.frozen.is_some()
    }

    /// Mean over the batches recorded since the last rollover.
    pub fn running_mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn reward(&self, loss: f64, cfg: &RewardConfig) -> Result<f64> {
        bounded_reward(loss, self.average()?, cfg)
    }
}
