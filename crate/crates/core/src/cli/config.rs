//! Run configuration: defaults, then a TOML file of dotted keys, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::contrastive::{
    AugmentationStrategy, ContrastiveConfig, PretrainConfig, ProbeConfig, QueueConfig,
};
use crate::data::{load_cifar10, synth_shapes, Dataset, Split};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyMode};
use crate::ppo::PpoConfig;
use crate::reward::RewardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Cifar10,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Synth => "synth",
            DataSource::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "synth" => Ok(DataSource::Synth),
            "cifar10" => Ok(DataSource::Cifar10),
            _ => Err(Error::Parse(format!("unknown dataset `{s}` (synth|cifar10)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub dir: PathBuf,
    /// Fraction of CIFAR-10 training records used.
    pub fraction: f64,
    /// Seeds the synthetic sets and the CIFAR-10 subset choice.
    pub seed: u64,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            fraction: 1.0,
            seed: 0,
            synth_train: 500,
            synth_test: 200,
            synth_classes: 2,
        }
    }
}

impl DataConfig {
    /// Unlabeled-use training split for pretraining and labeled probe training.
    pub fn train(&self) -> Result<Dataset> {
        match self.source {
            DataSource::Synth => synth_shapes(self.synth_train, self.synth_classes, self.seed),
            DataSource::Cifar10 => load_cifar10(&self.dir, Split::Train, self.fraction, self.seed),
        }
    }

    /// Held-out split for probe evaluation; the synthetic one uses the next seed.
    pub fn test(&self) -> Result<Dataset> {
        match self.source {
            DataSource::Synth => {
                let mut ds = synth_shapes(self.synth_test, self.synth_classes, self.seed.wrapping_add(1))?;
                ds.split = Split::Test;
                Ok(ds)
            }
            DataSource::Cifar10 => load_cifar10(&self.dir, Split::Test, 1.0, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: AugmentationStrategy,
    pub out: PathBuf,
    pub data: DataConfig,
    pub contrastive: ContrastiveConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub queue: QueueConfig,
    /// `policy.mode` is not a key of its own; it follows `mode`.
    pub policy: PolicyConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: AugmentationStrategy::CoViews,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            contrastive: ContrastiveConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            queue: QueueConfig::default(),
            policy: PolicyConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// One `key = value` override, `key` dotted.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }
}

impl FromStr for Override {
    type Err = Error;

    /// `a.b=v`; `v` is read as a TOML value, falling back to a bare string.
    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{s}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse(format!("override `{s}` has an empty key")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Self::new(key, value))
    }
}

fn defaults_table() -> Result<Table> {
    let mut t = Table::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
    if let Some(Value::Table(p)) = t.get_mut("policy") {
        p.remove("mode");
    }
    Ok(t)
}

/// Writes `value` at `path` inside `base`, which must already contain it.
fn set_path(base: &mut Table, path: &[&str], value: Value, full: &str) -> Result<()> {
    let (head, rest) = path.split_first().expect("non-empty path");
    let slot = base
        .get_mut(*head)
        .ok_or_else(|| Error::Config(format!("unknown config key `{full}`")))?;
    if rest.is_empty() {
        return merge_value(slot, value, full);
    }
    match slot {
        Value::Table(t) => set_path(t, rest, value, full),
        _ => Err(Error::Config(format!("config key `{full}` descends into a scalar"))),
    }
}

fn merge_value(slot: &mut Value, value: Value, full: &str) -> Result<()> {
    match (slot, value) {
        (Value::Table(dst), Value::Table(src)) => {
            for (k, v) in src {
                let key = format!("{full}.{k}");
                let inner = dst
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                merge_value(inner, v, &key)?;
            }
            Ok(())
        }
        (Value::Table(_), _) => Err(Error::Config(format!("config key `{full}` is a section"))),
        (_, Value::Table(_)) => Err(Error::Config(format!("config key `{full}` is not a section"))),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order. Unknown keys
    /// in either layer are rejected before anything runs.
    pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let file_table = match file {
            Some(p) => Some(
                std::fs::read_to_string(p)?
                    .parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::resolve_tables(file_table, overrides)
    }

    pub fn resolve_str(file: &str, overrides: &[Override]) -> Result<Self> {
        let t = file
            .parse::<Table>()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        Self::resolve_tables(Some(t), overrides)
    }

    fn resolve_tables(file: Option<Table>, overrides: &[Override]) -> Result<Self> {
        let mut table = defaults_table()?;
        if let Some(f) = file {
            for (k, v) in f {
                set_path(&mut table, &[k.as_str()], v, &k)?;
            }
        }
        for o in overrides {
            let path: Vec<&str> = o.key.split('.').collect();
            set_path(&mut table, &path, o.value.clone(), &o.key)?;
        }
        let mode: AugmentationStrategy = table
            .get("mode")
            .cloned()
            .ok_or_else(|| Error::Config("missing mode".into()))?
            .try_into()
            .map_err(|e| Error::Config(format!("mode: {e}")))?;
        if let Some(Value::Table(p)) = table.get_mut("policy") {
            let pm = mode.policy_mode().unwrap_or(PolicyMode::CoViews);
            p.insert("mode".into(), Value::String(pm.as_str().into()));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_config().validate()?;
        self.probe.validate()?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::Config(format!("data.fraction {} not in (0, 1]", self.data.fraction)));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            contrastive: self.contrastive.clone(),
            reward: self.reward,
            ppo: self.ppo.clone(),
            queue: self.queue,
            policy: self.policy.clone(),
        }
    }

    /// TOML text that resolves back to this exact config.
    pub fn to_toml(&self) -> Result<String> {
        let mut t = Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(Value::Table(p)) = t.get_mut("policy") {
            p.remove("mode");
        }
        toml::to_string(&t).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        let back = RunConfig::resolve_str(&d.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn three_layers() {
        let file = "seed = 7\nreward.th = 1.5\nreward.b = 0.4\n[contrastive]\nk = 3\n";
        let flags = vec![Override::new("reward.b", 0.1), Override::new("queue.capacity", 3i64)];
        let c = RunConfig::resolve_str(file, &flags).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.reward.th, 1.5);
        assert_eq!(c.reward.b, 0.1);
        assert_eq!(c.contrastive.k, 3);
        assert_eq!(c.queue.capacity, 3);
        assert_eq!(c.contrastive.epochs, ContrastiveConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve_str("reward.thx = 1.5", &[]).is_err());
        assert!(RunConfig::resolve_str("bogus = 1", &[]).is_err());
        assert!(RunConfig::resolve_str("policy.mode = \"coviews\"", &[]).is_err());
        assert!(RunConfig::resolve_str("", &[Override::new("ppo.nope", 1i64)]).is_err());
        assert!(RunConfig::resolve_str("reward = 3", &[]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::resolve_str("reward.th = 0.9", &[]).is_err());
        assert!(RunConfig::resolve_str("mode = \"sideways\"", &[]).is_err());
        assert!(RunConfig::resolve_str("contrastive.k = 0", &[]).is_err());
    }

    #[test]
    fn mode_drives_policy_mode() {
        let c = RunConfig::resolve_str("mode = \"indepviews\"", &[]).unwrap();
        assert_eq!(c.policy.mode, crate::policy::PolicyMode::IndepViews);
        let r = RunConfig::resolve_str("", &["mode=random".parse().unwrap()]).unwrap();
        assert_eq!(r.mode, AugmentationStrategy::Random);
    }

    #[test]
    fn override_parsing() {
        let o: Override = "reward.th=1.7".parse().unwrap();
        assert_eq!(o.value, Value::Float(1.7));
        let o: Override = "data.dir=/tmp/x y".parse().unwrap();
        assert_eq!(o.value, Value::String("/tmp/x y".into()));
        let o: Override = "contrastive.encoder.channels=[8, 8]".parse().unwrap();
        assert!(o.value.is_array());
        assert!("noequals".parse::<Override>().is_err());
    }
}
