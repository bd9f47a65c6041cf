use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::checkpoint::{self, Metadata};
use crate::policy::{PolicyConfig, PolicyMode, PolicyNet, SampledPair};

pub const SNAPSHOT_VERSION: u32 = 1;

/// Immutable copy of a policy taken at the end of a search.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    net: PolicyNet,
    epoch: usize,
}

impl PolicySnapshot {
    pub fn new(net: &PolicyNet, epoch: usize) -> Self {
        Self {
            net: net.clone(),
            epoch,
        }
    }

    pub fn mode(&self) -> PolicyMode {
        self.net.mode()
    }

    pub fn n_tau(&self) -> usize {
        self.net.n_tau()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Stable label derived from the creation epoch, e.g. `e25`.
    pub fn label(&self) -> String {
        format!("e{}", self.epoch)
    }

    pub fn config(&self) -> &PolicyConfig {
        self.net.config()
    }

    pub fn checksum(&self) -> u64 {
        self.net.params().checksum()
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampledPair> {
        self.net.sample_pair(rng)
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<SampledPair>> {
        self.net.sample_batch(n, rng)
    }

    /// A live network with the snapshot's parameters.
    pub fn restore(&self) -> PolicyNet {
        self.net.clone()
    }

    /// Read-only access for analysis (logits, first-step probabilities).
    pub fn net(&self) -> &PolicyNet {
        &self.net
    }

    pub fn metadata(&self) -> Result<Metadata> {
        let mut meta = Metadata::new();
        meta.insert("kind".into(), "policy_snapshot".into());
        meta.insert("snapshot_version".into(), SNAPSHOT_VERSION.to_string());
        meta.insert("mode".into(), self.mode().to_string());
        meta.insert("n_tau".into(), self.n_tau().to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("policy_config".into(), serde_json::to_string(self.config())?);
        Ok(meta)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(self.net.params(), &self.metadata()?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = checkpoint::decode(bytes)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot header lacks `{k}`")))
        };
        if get("kind")? != "policy_snapshot" {
            return Err(Error::Checkpoint("not a policy snapshot".into()));
        }
        let version: u32 = get("snapshot_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad snapshot_version".into()))?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Checkpoint(format!(
                "snapshot version {version}, expected {SNAPSHOT_VERSION}"
            )));
        }
        let cfg: PolicyConfig = serde_json::from_str(get("policy_config")?)?;
        if get("mode")? != cfg.mode.as_str() || get("n_tau")? != &cfg.n_tau.to_string() {
            return Err(Error::Checkpoint("snapshot header disagrees with its config".into()));
        }
        let epoch = get("epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epoch".into()))?;
        let net = PolicyNet::from_params(cfg, params)?;
        Ok(Self { net, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl PolicyNet {
    pub fn snapshot(&self, epoch: usize) -> PolicySnapshot {
        PolicySnapshot::new(self, epoch)
    }

    /// Overwrites this network's parameters with the snapshot's.
    pub fn load_snapshot(&mut self, snap: &PolicySnapshot) -> Result<()> {
        if snap.mode() != self.mode() {
            return Err(Error::Checkpoint(format!(
                "snapshot mode {} cannot be restored onto a {} policy",
                snap.mode(),
                self.mode()
            )));
        }
        if snap.config() != self.config() || !snap.net.params().same_layout(self.params()) {
            return Err(Error::Checkpoint("snapshot architecture differs".into()));
        }
        *self = snap.net.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(mode: PolicyMode, seed: u64) -> PolicyNet {
        PolicyNet::new(
            PolicyConfig {
                mode,
                ..PolicyConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_samples_identically() {
        let live = net(PolicyMode::CoViews, 4);
        let snap = live.snapshot(12);
        let restored = PolicySnapshot::from_bytes(&snap.to_bytes().unwrap()).unwrap();
        assert_eq!(restored.epoch(), 12);
        assert_eq!(restored.checksum(), snap.checksum());
        for seed in 0..5 {
            let a = snap.sample_pair(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = restored.sample_pair(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let c = restored.restore().sample_pair(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn unaffected_by_later_training() {
        let mut live = net(PolicyMode::IndepViews, 1);
        let snap = live.snapshot(0);
        let before = snap.checksum();
        for t in live.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        assert_eq!(snap.checksum(), before);
        assert_ne!(live.params().checksum(), before);
    }

    #[test]
    fn mode_mismatch_rejected() {
        let snap = net(PolicyMode::CoViews, 0).snapshot(0);
        let mut other = net(PolicyMode::IndepViews, 0);
        assert!(other.load_snapshot(&snap).is_err());
        let mut same = net(PolicyMode::CoViews, 9);
        same.load_snapshot(&snap).unwrap();
        assert_eq!(same.params().checksum(), snap.checksum());
    }

    #[test]
    fn version_mismatch_rejected() {
        let snap = net(PolicyMode::CoViews, 0).snapshot(3);
        let mut meta = snap.metadata().unwrap();
        meta.insert("snapshot_version".into(), "2".into());
        let bytes = checkpoint::encode(snap.net().params(), &meta);
        assert!(PolicySnapshot::from_bytes(&bytes).is_err());
        meta.insert("snapshot_version".into(), "1".into());
        meta.insert("kind".into(), "encoder".into());
        let bytes = checkpoint::encode(snap.net().params(), &meta);
        assert!(PolicySnapshot::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let snap = net(PolicyMode::IndepViews, 2).snapshot(5);
        snap.save(&path).unwrap();
        let back = PolicySnapshot::load(&path).unwrap();
        assert_eq!(back.mode(), PolicyMode::IndepViews);
        assert_eq!(back.checksum(), snap.checksum());
    }
}
