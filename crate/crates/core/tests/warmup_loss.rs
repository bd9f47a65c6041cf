use adaptaug::contrastive::{ContrastiveConfig, ContrastiveTrainer, PolicySource};
use adaptaug::data::synth_shapes;
use adaptaug::reward::EpochLossTracker;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First five epochs of the default run with random subpolicies.
#[test]
fn warmup_loss_falls_by_epoch_five() {
    let ds = synth_shapes(500, 2, 0).unwrap();
    let cfg = ContrastiveConfig::default();
    let mut trainer = ContrastiveTrainer::new(cfg, ds.len(), 0).unwrap();
    let mut tracker = EpochLossTracker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses: Vec<f64> = (1..=5)
        .map(|e| {
            trainer
                .train_epoch(&ds, PolicySource::Random { n_tau: 2 }, &mut tracker, e, &mut rng)
                .unwrap()
                .mean_loss
        })
        .collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[4] < losses[0], "{losses:?}");
}
