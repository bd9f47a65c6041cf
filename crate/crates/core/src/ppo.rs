//! One-step-episode PPO without a critic: normalized rewards are the
//! advantages, the update is the clipped surrogate plus an entropy bonus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{OpKind, SubpolicyPair};
use crate::error::{Error, Result};
use crate::numeric::{Adam, Graph};
use crate::policy::{PolicyConfig, PolicyNet, PolicySnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub ppo_epochs: usize,
    pub samples_per_epoch: usize,
    pub updates_per_epoch: usize,
    pub update_batch: usize,
    pub entropy_coef: f64,
    pub clip: f64,
    pub lr: f64,
    /// Pairs (and images) per reward evaluation; must divide `samples_per_epoch`.
    pub collection_batch: usize,
    /// Start each search from the newest queued policy instead of a fresh net.
    pub warm_start: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            ppo_epochs: 100,
            samples_per_epoch: 128,
            updates_per_epoch: 4,
            update_batch: 16,
            entropy_coef: 0.05,
            clip: 0.2,
            lr: 5e-5,
            collection_batch: 32,
            warm_start: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.ppo_epochs == 0 || self.update_batch == 0 || self.collection_batch == 0 {
            return fail("ppo epochs and batch sizes must be positive".into());
        }
        if self.updates_per_epoch * self.update_batch > self.samples_per_epoch {
            return fail(format!(
                "{} updates of {} exceed the {} samples per epoch",
                self.updates_per_epoch, self.update_batch, self.samples_per_epoch
            ));
        }
        if self.samples_per_epoch % self.collection_batch != 0 {
            return fail(format!(
                "collection batch {} does not divide {} samples",
                self.collection_batch, self.samples_per_epoch
            ));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return fail(format!("clip {} not in (0, 1)", self.clip));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !self.entropy_coef.is_finite() {
            return fail("ppo lr must be positive and coefficients finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub pair: SubpolicyPair,
    pub old_log_prob: f64,
    pub reward: f64,
    pub advantage: f64,
}

/// Source of rewards for a batch of sampled pairs.
pub trait RewardEnv {
    /// One reward per pair, in order.
    fn rewards(&mut self, pairs: &[SubpolicyPair], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Reward 1 when view 1 starts with `target`, else 0.
#[derive(Debug, Clone, Copy)]
pub struct TargetOpEnv {
    pub target: OpKind,
}

impl RewardEnv for TargetOpEnv {
    fn rewards(&mut self, pairs: &[SubpolicyPair], _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(pairs
            .iter()
            .map(|p| f64::from(u8::from(p.view1.steps()[0].op == self.target)))
            .collect())
    }
}

/// The same reward for every pair.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEnv(pub f64);

impl RewardEnv for ConstantEnv {
    fn rewards(&mut self, pairs: &[SubpolicyPair], _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(vec![self.0; pairs.len()])
    }
}

pub fn collect(
    policy: &PolicyNet,
    env: &mut dyn RewardEnv,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let bs = cfg.collection_batch;
    let mut out = Vec::with_capacity(cfg.samples_per_epoch);
    for _ in 0..cfg.samples_per_epoch / bs {
        let samples = policy.sample_batch(bs, rng)?;
        let pairs: Vec<SubpolicyPair> = samples.iter().map(|s| s.pair.clone()).collect();
        let rewards = env.rewards(&pairs, rng)?;
        if rewards.len() != bs {
            return Err(Error::OutOfRange(format!(
                "reward env returned {} rewards for {bs} pairs",
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("reward {r}")));
        }
        out.extend(samples.into_iter().zip(rewards).map(|(s, reward)| Trajectory {
            pair: s.pair,
            old_log_prob: s.log_prob,
            reward,
            advantage: 0.0,
        }));
    }
    Ok(out)
}

/// `A = (r − mean r)/(std r + 1e-8)` with the population standard deviation.
pub fn normalize_advantages(trajs: &mut [Trajectory]) -> Result<()> {
    if trajs.len() < 2 {
        return Err(Error::OutOfRange(format!(
            "advantage normalization needs >= 2 trajectories, got {}",
            trajs.len()
        )));
    }
    let n = trajs.len() as f64;
    let mean = trajs.iter().map(|t| t.reward).sum::<f64>() / n;
    let var = trajs.iter().map(|t| (t.reward - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    for t in trajs.iter_mut() {
        t.advantage = (t.reward - mean) / denom;
    }
    Ok(())
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Mean over minibatches of the full loss.
    pub loss: f64,
    /// Mean over minibatches of `mean(surrogate)`.
    pub surrogate: f64,
    pub entropy: f64,
    /// Ratios observed in the first minibatch, before any step.
    pub first_ratios: Vec<f64>,
    pub clip_fraction: f64,
}

pub fn update(
    policy: &mut PolicyNet,
    opt: &mut Adam,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateReport> {
    cfg.validate()?;
    if trajs.len() < cfg.updates_per_epoch * cfg.update_batch {
        return Err(Error::OutOfRange(format!(
            "{} trajectories cannot fill {} minibatches of {}",
            trajs.len(),
            cfg.updates_per_epoch,
            cfg.update_batch
        )));
    }
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(rng);
    let mut report = UpdateReport::default();
    let mut clipped = 0usize;
    for (u, chunk) in order
        .chunks(cfg.update_batch)
        .take(cfg.updates_per_epoch)
        .enumerate()
    {
        let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
        let pairs: Vec<SubpolicyPair> = batch.iter().map(|t| t.pair.clone()).collect();
        let n = batch.len();
        let mut g = Graph::new();
        let (new_lp, entropy) = policy.log_prob_graph(&mut g, &pairs)?;
        let old_lp = g.constant_raw(vec![n], batch.iter().map(|t| t.old_log_prob).collect());
        let adv = g.constant_raw(vec![n], batch.iter().map(|t| t.advantage).collect());
        let diff = g.sub(new_lp, old_lp)?;
        let ratio = g.exp(diff);
        let unclipped = g.mul(ratio, adv)?;
        let clamped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let clipped_term = g.mul(clamped, adv)?;
        let surr = g.minimum(unclipped, clipped_term)?;
        let surr_mean = g.mean(surr);
        let ent_mean = g.mean(entropy);
        let pg = g.scale(surr_mean, -1.0);
        let bonus = g.scale(ent_mean, -cfg.entropy_coef);
        let loss = g.add(pg, bonus)?;
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "ppo loss {loss_value} at minibatch {u}"
            )));
        }
        let ratios = g.value(ratio).to_vec();
        clipped += ratios
            .iter()
            .filter(|r| (**r - 1.0).abs() > cfg.clip)
            .count();
        if u == 0 {
            report.first_ratios = ratios;
        }
        report.loss += loss_value;
        report.surrogate += g.scalar(surr_mean);
        report.entropy += g.scalar(ent_mean);
        g.backward(loss)?;
        g.write_param_grads(policy.params_mut());
        opt.step(policy.params_mut())?;
    }
    let k = cfg.updates_per_epoch as f64;
    report.loss /= k;
    report.surrogate /= k;
    report.entropy /= k;
    report.clip_fraction = clipped as f64 / (k * cfg.update_batch as f64);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoEpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub surrogate_loss: f64,
    pub loss: f64,
}

/// Runs `ppo_epochs` of collect → normalize → update on `policy` in place.
pub fn train(
    policy: &mut PolicyNet,
    env: &mut dyn RewardEnv,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PpoEpochStats>> {
    cfg.validate()?;
    let mut opt = Adam::new(cfg.lr);
    let mut stats = Vec::with_capacity(cfg.ppo_epochs);
    for epoch in 0..cfg.ppo_epochs {
        let mut trajs = collect(policy, env, cfg, rng)?;
        normalize_advantages(&mut trajs)?;
        let report = update(policy, &mut opt, &trajs, cfg, rng)?;
        let n = trajs.len() as f64;
        stats.push(PpoEpochStats {
            epoch,
            mean_reward: trajs.iter().map(|t| t.reward).sum::<f64>() / n,
            mean_entropy: report.entropy,
            surrogate_loss: -report.surrogate,
            loss: report.loss,
        });
    }
    if !policy.params().all_finite() {
        return Err(Error::NonFinite("policy parameters after search".into()));
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub snapshot: PolicySnapshot,
    pub stats: Vec<PpoEpochStats>,
}

/// Trains a policy against `env` and freezes it with `epoch` as its creation epoch.
pub fn search_policy(
    env: &mut dyn RewardEnv,
    policy_cfg: &PolicyConfig,
    cfg: &PpoConfig,
    warm: Option<&PolicySnapshot>,
    epoch: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    let mut policy = PolicyNet::new(policy_cfg.clone(), seed)?;
    if cfg.warm_start {
        if let Some(snap) = warm {
            policy.load_snapshot(snap)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let stats = train(&mut policy, env, cfg, &mut rng)?;
    Ok(SearchOutcome {
        snapshot: policy.snapshot(epoch),
        stats,
    })
}
