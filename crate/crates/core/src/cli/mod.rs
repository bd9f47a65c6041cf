//! Command-line runner: pretraining, probing, standalone search, snapshot
//! inspection and reward sweeps. Every run owns one output directory.

pub mod config;
pub mod inspect;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::OpKind;
use crate::contrastive::{
    batch_info_nce, build_views, linear_probe, pretrain, AugmentationStrategy, Encoder, InfoNceEnv,
    PolicySource, PretrainObserver, ProbeReport,
};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, Phase};
use crate::numeric::checkpoint::Metadata;
use crate::policy::PolicySnapshot;
use crate::ppo::{search_policy, RewardEnv, TargetOpEnv};

pub use config::{DataConfig, DataSource, Override, RunConfig};
pub use inspect::{chi_square_independence, snapshot_stats, SnapshotStats};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const ENCODER: &str = "encoder.ckpt";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const PROBE: &str = "probe.json";
pub const OP_PROBS: &str = "op_probs.csv";
pub const COOCCURRENCE: &str = "cooccurrence.csv";
pub const SWEEP: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "adaptaug", version)]
#[command(about = "Adaptive augmentation policy search for contrastive pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain an encoder with random or searched augmentation policies
    Pretrain(RunArgs),
    /// Linear-probe a run's encoder over several seeds
    Probe(ProbeArgs),
    /// Run one policy search against an encoder or a stubbed reward
    Search(SearchArgs),
    /// Export operation statistics of a run's policy snapshots
    Inspect(InspectArgs),
    /// Pretrain and probe over a grid of reward thresholds and tolerances
    Sweep(SweepArgs),
}

/// Settings shared by every command that resolves a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file of dotted keys, applied over the defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Augmentation strategy: coviews, indepviews or random
    #[arg(long)]
    pub mode: Option<AugmentationStrategy>,
    /// Reward threshold on the normalized loss
    #[arg(long)]
    pub reward_th: Option<f64>,
    /// Reward tolerance past the threshold
    #[arg(long)]
    pub reward_b: Option<f64>,
    /// Policy-refresh period in epochs
    #[arg(long)]
    pub k: Option<usize>,
    /// Policy queue capacity
    #[arg(long)]
    pub queue_cap: Option<usize>,
    /// Geometric base probability of the policy queue
    #[arg(long)]
    pub queue_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// synth or cifar10
    #[arg(long)]
    pub dataset: Option<DataSource>,
    /// Directory of the CIFAR-10 binary batches
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory of the run
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total contrastive epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Warmup epochs with random subpolicies
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Any config key, e.g. `--set ppo.lr=1e-4`; applied after the named flags
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<Override>,
}

fn path_value(p: &Path) -> Result<String> {
    p.to_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("non-UTF-8 path {}", p.display())))
}

fn int_value(name: &str, v: u64) -> Result<i64> {
    i64::try_from(v).map_err(|_| Error::Config(format!("{name} {v} exceeds the config integer range")))
}

impl RunArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Vec::new();
        if let Some(m) = self.mode {
            o.push(Override::new("mode", m.to_string()));
        }
        if let Some(v) = self.reward_th {
            o.push(Override::new("reward.th", v));
        }
        if let Some(v) = self.reward_b {
            o.push(Override::new("reward.b", v));
        }
        if let Some(v) = self.k {
            o.push(Override::new("contrastive.k", int_value("k", v as u64)?));
        }
        if let Some(v) = self.queue_cap {
            o.push(Override::new("queue.capacity", int_value("queue-cap", v as u64)?));
        }
        if let Some(v) = self.queue_p {
            o.push(Override::new("queue.base_prob", v));
        }
        if let Some(v) = self.seed {
            o.push(Override::new("seed", int_value("seed", v)?));
        }
        if let Some(v) = self.dataset {
            o.push(Override::new("data.source", v.to_string()));
        }
        if let Some(v) = &self.data_dir {
            o.push(Override::new("data.dir", path_value(v)?));
        }
        if let Some(v) = &self.out {
            o.push(Override::new("out", path_value(v)?));
        }
        if let Some(v) = self.epochs {
            o.push(Override::new("contrastive.epochs", int_value("epochs", v as u64)?));
        }
        if let Some(v) = self.warmup {
            o.push(Override::new("contrastive.warmup_epochs", int_value("warmup", v as u64)?));
        }
        o.extend(self.set.iter().cloned());
        Ok(o)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Run directory holding the encoder checkpoint and resolved config
    #[arg(long)]
    pub run: PathBuf,
    /// Number of probe seeds (defaults to `probe.seeds`)
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Relocated CIFAR-10 directory
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Stub reward: 1 when view 1's first operation is this one, else 0
    #[arg(long)]
    pub target: Option<OpKind>,
    /// Encoder checkpoint scoring the views (default: a fresh encoder)
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Creation epoch recorded in the snapshot
    #[arg(long, default_value_t = 0)]
    pub epoch: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Run directory with a `snapshots` subdirectory
    #[arg(long)]
    pub run: PathBuf,
    /// Pairs sampled per snapshot
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Reward thresholds, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub th: Vec<f64>,
    /// Reward tolerances, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub b: Vec<f64>,
}

/// Streams metrics to `metrics.jsonl` and snapshots to `snapshots/`.
struct RunWriter {
    metrics: BufWriter<File>,
    snapshot_dir: PathBuf,
    verbose: bool,
}

impl PretrainObserver for RunWriter {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.metrics, "{}", rec.to_json_line()?)?;
        self.metrics.flush()?;
        if self.verbose {
            match &rec.ppo {
                Some(stats) => {
                    let last = stats.last();
                    eprintln!(
                        "epoch {:>3} search  {} reward {:.4} entropy {:.3} queue {}",
                        rec.epoch,
                        rec.active_policy_id,
                        last.map_or(f64::NAN, |s| s.mean_reward),
                        last.map_or(f64::NAN, |s| s.mean_entropy),
                        rec.queue_len
                    );
                }
                None => eprintln!(
                    "epoch {:>3} {:<7} infonce {:.4} lr {:.5} policy {}",
                    rec.epoch, rec.phase, rec.mean_infonce, rec.lr, rec.active_policy_id
                ),
            }
        }
        Ok(())
    }

    fn snapshot(&mut self, snap: &PolicySnapshot) -> Result<()> {
        snap.save(&self.snapshot_dir.join(snapshot_file(snap.epoch())))
    }
}

pub fn snapshot_file(epoch: usize) -> String {
    format!("policy_e{epoch:04}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub out: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub snapshots: usize,
}

/// Runs pretraining into `cfg.out`, replacing any previous run artifacts there.
pub fn run_pretrain(cfg: &RunConfig, verbose: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let out = &cfg.out;
    let snapshot_dir = out.join(SNAPSHOT_DIR);
    if snapshot_dir.exists() {
        fs::remove_dir_all(&snapshot_dir)?;
    }
    fs::create_dir_all(&snapshot_dir)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    let train = cfg.data.train()?;
    let mut writer = RunWriter {
        metrics: BufWriter::new(File::create(out.join(METRICS))?),
        snapshot_dir,
        verbose,
    };
    let outcome = pretrain(&train, cfg.mode, &cfg.pretrain_config(), cfg.seed, &mut writer)?;
    let mut meta = Metadata::new();
    meta.insert("mode".into(), cfg.mode.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("epochs".into(), cfg.contrastive.epochs.to_string());
    outcome.encoder.save(&out.join(ENCODER), &meta)?;
    Ok(PretrainSummary {
        out: out.clone(),
        epoch_losses: outcome.epoch_losses,
        snapshots: outcome.snapshots.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub dataset: String,
    pub classes: usize,
    pub runs: Vec<ProbeReport>,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation across seeds; 0 for one seed.
    pub std_test_accuracy: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Probes `encoder` with seeds `0..cfg.probe.seeds` on the config's datasets.
pub fn probe_encoder(encoder: &Encoder, cfg: &RunConfig) -> Result<ProbeSummary> {
    let train = cfg.data.train()?;
    let test = cfg.data.test()?;
    probe_on(encoder, cfg, &train, &test)
}

pub fn probe_on(encoder: &Encoder, cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<ProbeSummary> {
    let runs = (0..cfg.probe.seeds as u64)
        .map(|s| linear_probe(encoder, train, test, &cfg.probe, s))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(ProbeSummary {
        dataset: cfg.data.source.to_string(),
        classes: runs[0].classes,
        runs,
        mean_test_accuracy: mean,
        std_test_accuracy: std,
    })
}

/// Loads a run directory's resolved config with extra overrides applied.
pub fn load_run_config(run: &Path, overrides: &[Override]) -> Result<RunConfig> {
    let path = run.join(RESOLVED_CONFIG);
    if !path.exists() {
        return Err(Error::Config(format!("{} not found", path.display())));
    }
    let mut o = vec![Override::new("out", path_value(run)?)];
    o.extend(overrides.iter().cloned());
    RunConfig::resolve(Some(&path), &o)
}

pub fn run_probe(run: &Path, overrides: &[Override]) -> Result<ProbeSummary> {
    let ckpt = run.join(ENCODER);
    if !ckpt.exists() {
        return Err(Error::Checkpoint(format!("encoder checkpoint {} not found", ckpt.display())));
    }
    let cfg = load_run_config(run, overrides)?;
    let (encoder, _) = Encoder::load(&ckpt)?;
    let summary = probe_encoder(&encoder, &cfg)?;
    fs::write(run.join(PROBE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Snapshots of a run, oldest first.
pub fn load_snapshots(run: &Path) -> Result<Vec<PolicySnapshot>> {
    let dir = run.join(SNAPSHOT_DIR);
    let mut snaps = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ckpt") {
                snaps.push(PolicySnapshot::load(&path)?);
            }
        }
    }
    if snaps.is_empty() {
        return Err(Error::Checkpoint(format!("no policy snapshots under {}", dir.display())));
    }
    snaps.sort_by_key(|s| s.epoch());
    Ok(snaps)
}

pub fn run_inspect(run: &Path, samples: usize, seed: u64) -> Result<Vec<SnapshotStats>> {
    let snaps = load_snapshots(run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = snaps
        .iter()
        .map(|s| snapshot_stats(s, samples, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    fs::write(run.join(OP_PROBS), inspect::op_probs_csv(&stats))?;
    fs::write(run.join(COOCCURRENCE), inspect::cooccurrence_csv(&stats))?;
    Ok(stats)
}

/// Mean InfoNCE of one random-policy pass over `ds`, in inference mode.
pub fn random_policy_loss(encoder: &Encoder, ds: &Dataset, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = &cfg.contrastive;
    let order = batches(ds.len(), c.batch_size, rng.random(), true)?;
    let source = PolicySource::Random { n_tau: cfg.policy.n_tau };
    let mut total = 0.0;
    for idx in &order {
        let images: Vec<_> = idx.iter().map(|&i| ds.image(i)).collect();
        let pairs = source.pairs(images.len(), rng)?;
        let views = build_views(&images, &pairs, c.magnitude_mapping, rng);
        total += batch_info_nce(encoder, &views, c.temperature)?;
    }
    Ok(total / order.len() as f64)
}

/// One standalone search written to `cfg.out`: the snapshot under
/// `snapshots/` and its record in `search.jsonl`.
pub fn run_search(
    cfg: &RunConfig,
    target: Option<OpKind>,
    encoder: Option<&Path>,
    epoch: usize,
) -> Result<(PolicySnapshot, MetricsRecord)> {
    cfg.validate()?;
    let Some(mode) = cfg.mode.policy_mode() else {
        return Err(Error::Config("search needs mode coviews or indepviews".into()));
    };
    let policy_cfg = crate::policy::PolicyConfig {
        mode,
        ..cfg.policy.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (outcome, normalizer) = match target {
        Some(t) => {
            let mut env = TargetOpEnv { target: t };
            let o = search_policy(&mut env, &policy_cfg, &cfg.ppo, None, epoch, rng.random())?;
            (o, 1.0)
        }
        None => {
            let ds = cfg.data.train()?;
            let enc = match encoder {
                Some(p) => Encoder::load(p)?.0,
                None => Encoder::new(cfg.contrastive.encoder.clone(), rng.random())?,
            };
            let normalizer = random_policy_loss(&enc, &ds, cfg, &mut rng)?;
            let mut env = InfoNceEnv {
                encoder: &enc,
                dataset: &ds,
                normalizer,
                reward: cfg.reward,
                temperature: cfg.contrastive.temperature,
                mapping: cfg.contrastive.magnitude_mapping,
                losses: Vec::new(),
            };
            let env: &mut dyn RewardEnv = &mut env;
            (search_policy(env, &policy_cfg, &cfg.ppo, None, epoch, rng.random())?, normalizer)
        }
    };
    let snap_dir = cfg.out.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snap_dir)?;
    outcome.snapshot.save(&snap_dir.join(snapshot_file(epoch)))?;
    let rec = MetricsRecord {
        epoch,
        phase: Phase::Search,
        mean_infonce: normalizer,
        lr: cfg.ppo.lr,
        active_policy_id: outcome.snapshot.label(),
        queue_len: 1,
        ppo: Some(outcome.stats),
    };
    fs::write(cfg.out.join("search.jsonl"), rec.to_json_line()? + "\n")?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok((outcome.snapshot, rec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub th: f64,
    pub b: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub runtime_s: f64,
    pub status: String,
}

impl SweepRow {
    fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        format!(
            "{},{},{},{},{:.1},{}",
            self.th,
            self.b,
            opt(self.accuracy_mean),
            opt(self.accuracy_std),
            self.runtime_s,
            self.status.replace([',', '\n'], ";")
        )
    }
}

pub fn sweep_cell_dir(root: &Path, th: f64, b: f64) -> PathBuf {
    root.join(format!("th{th}_b{b}"))
}

/// Pretrain and probe for every (th, b); a failing cell is recorded and the
/// sweep moves on.
pub fn run_sweep(base: &RunConfig, ths: &[f64], bs: &[f64], verbose: bool) -> Result<Vec<SweepRow>> {
    if ths.is_empty() || bs.is_empty() {
        return Err(Error::Config("sweep needs at least one th and one b".into()));
    }
    let root = base.out.clone();
    fs::create_dir_all(&root)?;
    let mut table = BufWriter::new(File::create(root.join(SWEEP))?);
    writeln!(table, "th,b,accuracy_mean,accuracy_std,runtime_s,status")?;
    let mut rows = Vec::new();
    for &th in ths {
        for &b in bs {
            let start = Instant::now();
            let result = (|| -> Result<ProbeSummary> {
                let mut cfg = base.clone();
                cfg.reward = crate::reward::RewardConfig::new(th, b)?;
                cfg.out = sweep_cell_dir(&root, th, b);
                run_pretrain(&cfg, verbose)?;
                run_probe(&cfg.out, &[])
            })();
            let runtime_s = start.elapsed().as_secs_f64();
            let row = match result {
                Ok(p) => SweepRow {
                    th,
                    b,
                    accuracy_mean: Some(p.mean_test_accuracy),
                    accuracy_std: Some(p.std_test_accuracy),
                    runtime_s,
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    th,
                    b,
                    accuracy_mean: None,
                    accuracy_std: None,
                    runtime_s,
                    status: format!("error: {e}"),
                },
            };
            writeln!(table, "{}", row.csv_line())?;
            table.flush()?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve().context("resolving configuration")?;
            let s = run_pretrain(&cfg, true)?;
            println!(
                "{} epochs, {} snapshots, final infonce {:.4}; artifacts in {}",
                s.epoch_losses.len(),
                s.snapshots,
                s.epoch_losses.last().copied().unwrap_or(f64::NAN),
                s.out.display()
            );
        }
        Command::Probe(args) => {
            let mut o = Vec::new();
            if let Some(n) = args.seeds {
                o.push(Override::new("probe.seeds", int_value("seeds", n as u64)?));
            }
            if let Some(d) = &args.data_dir {
                o.push(Override::new("data.dir", path_value(d)?));
            }
            let s = run_probe(&args.run, &o)?;
            for r in &s.runs {
                println!("seed {}: top-1 {:.4} (train {:.4})", r.seed, r.test_accuracy, r.train_accuracy);
            }
            println!(
                "top-1 accuracy {:.4} ± {:.4} over {} seeds",
                s.mean_test_accuracy,
                s.std_test_accuracy,
                s.runs.len()
            );
        }
        Command::Search(args) => {
            let cfg = args.run.resolve().context("resolving configuration")?;
            let (snap, rec) = run_search(&cfg, args.target, args.encoder.as_deref(), args.epoch)?;
            let (ops, _) = snap.net().first_step_probs()?;
            let last = rec.ppo.as_ref().and_then(|s| s.last().cloned());
            if let Some(l) = last {
                println!("final mean reward {:.4}, entropy {:.4}", l.mean_reward, l.mean_entropy);
            }
            let mut ranked: Vec<(OpKind, f64)> = OpKind::ALL.iter().map(|&o| (o, ops[o.index()])).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            for (op, p) in ranked.iter().take(3) {
                println!("P(first op = {op}) = {p:.4}");
            }
            println!("snapshot written under {}", cfg.out.join(SNAPSHOT_DIR).display());
        }
        Command::Inspect(args) => {
            let stats = run_inspect(&args.run, args.samples, args.seed)?;
            for st in &stats {
                let (chi2, dof) = chi_square_independence(&st.first_step);
                println!("{}: {} samples, first-step chi-square {chi2:.1} on {dof} dof", st.label, st.samples);
            }
            println!("wrote {} and {}", OP_PROBS, COOCCURRENCE);
        }
        Command::Sweep(args) => {
            let cfg = args.run.resolve().context("resolving configuration")?;
            let rows = run_sweep(&cfg, &args.th, &args.b, false)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            for r in &rows {
                println!("{}", r.csv_line());
            }
            if failed == rows.len() {
                bail!("every sweep cell failed");
            }
        }
    }
    Ok(())
}
