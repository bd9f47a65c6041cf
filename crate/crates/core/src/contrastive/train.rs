use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_subpolicy_with, random_pair, Image, MagnitudeMapping, SubpolicyPair,
};
use crate::contrastive::{info_nce_stacked, Encoder, EncoderConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, Phase};
use crate::numeric::{Graph, Sgd};
use crate::policy::{PolicyConfig, PolicyMode, PolicySnapshot};
use crate::ppo::{search_policy, PpoConfig, RewardEnv};
use crate::queue::PolicyQueue;
use crate::reward::{bounded_reward, EpochLossTracker, RewardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs trained with random subpolicies before any search.
    pub warmup_epochs: usize,
    /// Policy-refresh period in epochs.
    pub k: usize,
    /// Base learning rate is `lr_scale · batch_size / 256`.
    pub lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate ramp length before cosine annealing.
    pub lr_warmup_epochs: usize,
    pub magnitude_mapping: MagnitudeMapping,
    pub encoder: EncoderConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            batch_size: 64,
            epochs: 60,
            warmup_epochs: 20,
            k: 5,
            lr_scale: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_warmup_epochs: 10,
            magnitude_mapping: MagnitudeMapping::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.warmup_epochs == 0 || self.k == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, warmup_epochs, k and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr_scale > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.encoder.validate()
    }

    pub fn base_lr(&self) -> f64 {
        self.lr_scale * self.batch_size as f64 / 256.0
    }

    /// Epochs that run a policy search: `epoch > warmup` and `epoch % k == 0`.
    pub fn search_epochs(&self) -> Vec<usize> {
        (1..=self.epochs)
            .filter(|e| *e > self.warmup_epochs && e % self.k == 0)
            .collect()
    }
}

/// Linear ramp over `warmup_steps`, then cosine decay to zero at `total_steps`.
pub fn lr_at(base: f64, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let t = (step - warmup_steps).min(span) as f64 / span as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Where each image's subpolicy pair comes from during an epoch.
#[derive(Debug, Clone, Copy)]
pub enum PolicySource<'a> {
    Random { n_tau: usize },
    Queue(&'a PolicyQueue),
}

impl PolicySource<'_> {
    pub fn pairs<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<SubpolicyPair>> {
        match self {
            PolicySource::Random { n_tau } => Ok((0..n).map(|_| random_pair(*n_tau, rng)).collect()),
            PolicySource::Queue(q) => {
                let picks = (0..n)
                    .map(|_| q.sample_index(rng))
                    .collect::<Result<Vec<_>>>()?;
                let snaps: Vec<&PolicySnapshot> = q.iter().collect();
                let mut out: Vec<Option<SubpolicyPair>> = vec![None; n];
                for (s, snap) in snaps.iter().enumerate() {
                    let rows: Vec<usize> = (0..n).filter(|&i| picks[i] == s).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sampled = snap.sample_batch(rows.len(), rng)?;
                    for (i, sp) in rows.into_iter().zip(sampled) {
                        out[i] = Some(sp.pair);
                    }
                }
                Ok(out.into_iter().map(|p| p.expect("every row assigned")).collect())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySource::Random { .. } => "random".into(),
            PolicySource::Queue(q) => q.iter().next().map_or("random".into(), |s| s.label()),
        }
    }
}

/// Applies each pair's view-1 and view-2 subpolicies to its image.
pub fn build_views<R: Rng>(
    images: &[&Image],
    pairs: &[SubpolicyPair],
    mapping: MagnitudeMapping,
    rng: &mut R,
) -> Vec<Image> {
    let mut v1 = Vec::with_capacity(images.len());
    let mut v2 = Vec::with_capacity(images.len());
    for (img, pair) in images.iter().zip(pairs) {
        v1.push(apply_subpolicy_with(img, &pair.view1, mapping, rng));
        v2.push(apply_subpolicy_with(img, &pair.view2, mapping, rng));
    }
    v1.extend(v2);
    v1
}

/// InfoNCE of a batch of stacked views under a frozen encoder.
pub fn batch_info_nce(encoder: &Encoder, stacked_views: &[Image], tau: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let x = encoder.input(&mut g, stacked_views)?;
    let out = encoder.forward(&mut g, x)?;
    let loss = info_nce_stacked(&mut g, out.embeddings, stacked_views.len() / 2, tau)?;
    Ok(g.scalar(loss))
}

/// Reward environment of the search phase: one batch InfoNCE under the
/// frozen encoder, normalized and bounded, shared by the batch's pairs.
pub struct InfoNceEnv<'a> {
    pub encoder: &'a Encoder,
    pub dataset: &'a Dataset,
    pub normalizer: f64,
    pub reward: RewardConfig,
    pub temperature: f64,
    pub mapping: MagnitudeMapping,
    /// Raw batch losses observed, in order.
    pub losses: Vec<f64>,
}

impl RewardEnv for InfoNceEnv<'_> {
    fn rewards(&mut self, pairs: &[SubpolicyPair], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.dataset.len();
        if pairs.len() > n {
            return Err(Error::OutOfRange(format!(
                "collection batch {} exceeds dataset size {n}",
                pairs.len()
            )));
        }
        let idx = index::sample(rng, n, pairs.len());
        let images: Vec<&Image> = idx.iter().map(|i| self.dataset.image(i)).collect();
        let views = build_views(&images, pairs, self.mapping, rng);
        let loss = batch_info_nce(self.encoder, &views, self.temperature)?;
        self.losses.push(loss);
        let r = bounded_reward(loss, self.normalizer, &self.reward)?;
        Ok(vec![r; pairs.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub last_lr: f64,
}

/// Encoder plus its optimizer state and position in the learning-rate schedule.
#[derive(Debug, Clone)]
pub struct ContrastiveTrainer {
    pub encoder: Encoder,
    opt: Sgd,
    cfg: ContrastiveConfig,
    steps_per_epoch: usize,
    step: usize,
}

impl ContrastiveTrainer {
    pub fn new(cfg: ContrastiveConfig, dataset_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {} exceeds dataset size {dataset_len}",
                cfg.batch_size
            )));
        }
        Ok(Self {
            encoder: Encoder::new(cfg.encoder.clone(), seed)?,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            steps_per_epoch: dataset_len / cfg.batch_size,
            step: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &ContrastiveConfig {
        &self.cfg
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(
            self.cfg.base_lr(),
            self.step,
            self.cfg.lr_warmup_epochs * self.steps_per_epoch,
            self.cfg.epochs * self.steps_per_epoch,
        )
    }

    /// One pass over `dataset`; every batch loss goes into `tracker`, which
    /// is rolled over at the end.
    pub fn train_epoch(
        &mut self,
        dataset: &Dataset,
        source: PolicySource<'_>,
        tracker: &mut EpochLossTracker,
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpochStats> {
        let order = batches(dataset.len(), self.cfg.batch_size, rng.random(), true)?;
        let mut total = 0.0;
        let mut last_lr = 0.0;
        for idx in &order {
            let images: Vec<&Image> = idx.iter().map(|&i| dataset.image(i)).collect();
            let pairs = source.pairs(images.len(), rng)?;
            let views = build_views(&images, &pairs, self.cfg.magnitude_mapping, rng);
            let mut g = Graph::new();
            let x = self.encoder.input(&mut g, &views)?;
            let out = self.encoder.forward(&mut g, x)?;
            let loss = info_nce_stacked(&mut g, out.embeddings, images.len(), self.cfg.temperature)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("InfoNCE {value} at epoch {epoch}")));
            }
            g.backward(loss)?;
            g.write_param_grads(self.encoder.params_mut());
            last_lr = self.current_lr();
            self.opt.step(self.encoder.params_mut(), last_lr)?;
            self.step += 1;
            tracker.record(value);
            total += value;
        }
        let mean_loss = total / order.len() as f64;
        tracker.rollover()?;
        Ok(EpochStats {
            epoch,
            mean_loss,
            batches: order.len(),
            last_lr,
        })
    }
}

/// Random subpolicies throughout, or the adaptive loop with a policy mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationStrategy {
    Random,
    CoViews,
    IndepViews,
}

impl AugmentationStrategy {
    pub fn policy_mode(self) -> Option<PolicyMode> {
        match self {
            Self::Random => None,
            Self::CoViews => Some(PolicyMode::CoViews),
            Self::IndepViews => Some(PolicyMode::IndepViews),
        }
    }
}

impl fmt::Display for AugmentationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::CoViews => "coviews",
            Self::IndepViews => "indepviews",
        })
    }
}

impl FromStr for AugmentationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "coviews" => Ok(Self::CoViews),
            "indepviews" => Ok(Self::IndepViews),
            _ => Err(Error::Parse(format!("unknown mode `{s}` (coviews|indepviews|random)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    pub capacity: usize,
    pub base_prob: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity: 5,
            base_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub contrastive: ContrastiveConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub queue: QueueConfig,
    /// `mode` is overridden by the strategy.
    pub policy: PolicyConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.policy.validate()?;
        PolicyQueue::new(self.queue.capacity, self.queue.base_prob)?;
        Ok(())
    }
}

/// Receives metrics and snapshots as the run produces them.
pub trait PretrainObserver {
    fn record(&mut self, _rec: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn snapshot(&mut self, _snap: &PolicySnapshot) -> Result<()> {
        Ok(())
    }
}

impl PretrainObserver for () {}

/// Keeps every record in memory.
impl PretrainObserver for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    /// Every snapshot produced, oldest first.
    pub snapshots: Vec<PolicySnapshot>,
    pub queue: PolicyQueue,
    /// Mean InfoNCE per epoch, epoch 1 first.
    pub epoch_losses: Vec<f64>,
}

/// The three-phase loop: random warmup, then every `k` epochs a policy search
/// whose snapshot joins the queue, with training from the queue in between.
/// Epochs past warmup that precede the first search fall back to random
/// subpolicies because the queue is still empty.
pub fn pretrain(
    dataset: &Dataset,
    strategy: AugmentationStrategy,
    cfg: &PretrainConfig,
    seed: u64,
    observer: &mut dyn PretrainObserver,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let c = &cfg.contrastive;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trainer = ContrastiveTrainer::new(c.clone(), dataset.len(), rng.random())?;
    let mut tracker = EpochLossTracker::new();
    let mut queue = PolicyQueue::new(cfg.queue.capacity, cfg.queue.base_prob)?;
    let mut snapshots = Vec::new();
    let mut epoch_losses = Vec::with_capacity(c.epochs);
    let n_tau = cfg.policy.n_tau.max(1);
    let policy_cfg = strategy.policy_mode().map(|mode| PolicyConfig {
        mode,
        ..cfg.policy.clone()
    });

    for epoch in 1..=c.epochs {
        if let Some(pcfg) = &policy_cfg {
            if epoch > c.warmup_epochs && epoch % c.k == 0 {
                let normalizer = tracker.average()?;
                let search_seed: u64 = rng.random();
                let mut env = InfoNceEnv {
                    encoder: &trainer.encoder,
                    dataset,
                    normalizer,
                    reward: cfg.reward,
                    temperature: c.temperature,
                    mapping: c.magnitude_mapping,
                    losses: Vec::new(),
                };
                let outcome = search_policy(&mut env, pcfg, &cfg.ppo, queue.iter().next(), epoch, search_seed)?;
                queue.push(outcome.snapshot.clone());
                observer.snapshot(&outcome.snapshot)?;
                observer.record(&MetricsRecord {
                    epoch,
                    phase: Phase::Search,
                    mean_infonce: normalizer,
                    lr: cfg.ppo.lr,
                    active_policy_id: outcome.snapshot.label(),
                    queue_len: queue.len(),
                    ppo: Some(outcome.stats),
                })?;
                snapshots.push(outcome.snapshot);
            }
        }
        let use_queue = policy_cfg.is_some() && epoch > c.warmup_epochs && !queue.is_empty();
        let source = if use_queue {
            PolicySource::Queue(&queue)
        } else {
            PolicySource::Random { n_tau }
        };
        let stats = trainer.train_epoch(dataset, source, &mut tracker, epoch, &mut rng)?;
        epoch_losses.push(stats.mean_loss);
        observer.record(&MetricsRecord {
            epoch,
            phase: if epoch <= c.warmup_epochs {
                Phase::Warmup
            } else {
                Phase::Train
            },
            mean_infonce: stats.mean_loss,
            lr: stats.last_lr,
            active_policy_id: source.label(),
            queue_len: queue.len(),
            ppo: None,
        })?;
    }
    Ok(PretrainOutcome {
        encoder: trainer.encoder,
        snapshots,
        queue,
        epoch_losses,
    })
}
