use std::path::Path;

use adaptaug::cli::{Override, RunConfig};

/// Small enough that a full pretrain + probe runs in about a second.
pub fn tiny_overrides(out: &Path) -> Vec<Override> {
    [
        "contrastive.epochs=4",
        "contrastive.warmup_epochs=2",
        "contrastive.k=2",
        "contrastive.batch_size=8",
        "contrastive.lr_warmup_epochs=1",
        "contrastive.encoder.channels=[4, 8]",
        "contrastive.encoder.proj_hidden=8",
        "contrastive.encoder.out_dim=8",
        "ppo.ppo_epochs=2",
        "ppo.samples_per_epoch=16",
        "ppo.updates_per_epoch=2",
        "ppo.update_batch=8",
        "ppo.collection_batch=8",
        "policy.hidden=8",
        "policy.embed=4",
        "data.synth_train=40",
        "data.synth_test=20",
        "probe.epochs=5",
        "probe.seeds=2",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .chain([Override::new("out", out.to_str().unwrap())])
    .collect()
}

pub fn tiny_config(out: &Path) -> RunConfig {
    RunConfig::resolve(None, &tiny_overrides(out)).unwrap()
}
