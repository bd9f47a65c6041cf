//! Recency-ordered queue of frozen policies with truncated geometric weights.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::PolicySnapshot;

#[derive(Debug, Clone)]
pub struct PolicyQueue {
    /// Most recent first.
    snapshots: VecDeque<PolicySnapshot>,
    capacity: usize,
    base_prob: f64,
}

/// `pᵢ = p(1−p)^{i−1} / (1 − (1−p)ⁿ)` for `i = 1..=n`.
///
/// The normalizer is accumulated as the sum of the terms, which equals the
/// closed form and keeps `n = 1` at exactly 1.
pub fn geometric_weights(n: usize, p: f64) -> Vec<f64> {
    let terms: Vec<f64> = (0..n).map(|i| p * (1.0 - p).powi(i as i32)).collect();
    let norm: f64 = terms.iter().sum();
    terms.into_iter().map(|t| t / norm).collect()
}

impl PolicyQueue {
    pub fn new(capacity: usize, base_prob: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be >= 1".into()));
        }
        if !(base_prob > 0.0 && base_prob < 1.0) {
            return Err(Error::Config(format!("queue base probability {base_prob} not in (0, 1)")));
        }
        Ok(Self {
            snapshots: VecDeque::with_capacity(capacity + 1),
            capacity,
            base_prob,
        })
    }

    pub fn push(&mut self, snap: PolicySnapshot) {
        self.snapshots.push_front(snap);
        self.snapshots.truncate(self.capacity);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn base_prob(&self) -> f64 {
        self.base_prob
    }

    /// Snapshots, most recent first.
    pub fn iter(&self) -> impl Iterator<Item = &PolicySnapshot> {
        self.snapshots.iter()
    }

    pub fn sampling_distribution(&self) -> Vec<f64> {
        geometric_weights(self.snapshots.len(), self.base_prob)
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.snapshots.is_empty() {
            return Err(Error::EmptyQueue);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let probs = self.sampling_distribution();
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(probs.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&PolicySnapshot> {
        let i = self.sample_index(rng)?;
        Ok(&self.snapshots[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyConfig, PolicyNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snap(epoch: usize) -> PolicySnapshot {
        PolicyNet::new(
            PolicyConfig {
                hidden: 4,
                embed: 2,
                ..PolicyConfig::default()
            },
            epoch as u64,
        )
        .unwrap()
        .snapshot(epoch)
    }

    #[test]
    fn worked_distributions() {
        let w = geometric_weights(3, 0.5);
        for (got, want) in w.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(geometric_weights(1, 0.3), vec![1.0]);
        for n in 1..=6 {
            let closed = 1.0 - 0.7f64.powi(n as i32);
            let w = geometric_weights(n, 0.3);
            assert!((w[0] - 0.3 / closed).abs() < 1e-12);
        }
        let w = geometric_weights(2, 0.5);
        assert!((w[0] - 0.5 / 0.75).abs() < 1e-12 && (w[1] - 0.25 / 0.75).abs() < 1e-12);
    }

    #[test]
    fn normalized_decreasing_geometric() {
        for n in 1..=5 {
            for k in 1..=9 {
                let p = k as f64 / 10.0;
                let w = geometric_weights(n, p);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for pair in w.windows(2) {
                    assert!(pair[0] > pair[1]);
                    assert!((pair[0] / pair[1] - 1.0 / (1.0 - p)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eviction_and_order() {
        let mut q = PolicyQueue::new(3, 0.5).unwrap();
        assert!(matches!(q.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyQueue)));
        for e in 0..4 {
            q.push(snap(e));
            assert_eq!(q.sampling_distribution().len(), q.len());
        }
        let epochs: Vec<usize> = q.iter().map(|s| s.epoch()).collect();
        assert_eq!(epochs, vec![3, 2, 1]);
    }

    #[test]
    fn duplicate_push_allowed() {
        let mut q = PolicyQueue::new(3, 0.5).unwrap();
        let s = snap(1);
        q.push(s.clone());
        q.push(s);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn invalid_config() {
        assert!(PolicyQueue::new(0, 0.5).is_err());
        assert!(PolicyQueue::new(3, 1.0).is_err());
        assert!(PolicyQueue::new(3, 0.0).is_err());
    }

    #[test]
    fn single_entry_always_sampled() {
        let mut q = PolicyQueue::new(5, 0.5).unwrap();
        q.push(snap(7));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(q.sample_index(&mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn empirical_frequencies() {
        let mut q = PolicyQueue::new(5, 0.5).unwrap();
        for e in 0..3 {
            q.push(snap(e));
        }
        let n = 70_000;
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            counts[q.sample_index(&mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma);
        }
        let again: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| q.sample_index(&mut rng).unwrap()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let first: Vec<usize> = (0..50).map(|_| q.sample_index(&mut rng).unwrap()).collect();
        assert_eq!(again, first);
    }
}
