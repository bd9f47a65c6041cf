//! Operation statistics of sampled policy snapshots.

use std::fmt::Write as _;

use rand::Rng;

use crate::augment::{OpKind, Subpolicy};
use crate::error::{Error, Result};
use crate::policy::PolicySnapshot;

const OPS: usize = OpKind::COUNT;
const SAMPLE_CHUNK: usize = 1024;

pub type OpMatrix = [[u64; OPS]; OPS];

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStats {
    pub epoch: usize,
    pub label: String,
    pub samples: usize,
    /// Op counts over every step of both views.
    pub pooled: [u64; OPS],
    pub view1: [u64; OPS],
    pub view2: [u64; OPS],
    /// (view-1 first op, view-2 first op) counts; totals `samples`.
    pub first_step: OpMatrix,
    /// (view-1 step op, view-2 step op) over all step combinations; totals
    /// `samples · n_tau²`.
    pub any_step: OpMatrix,
}

fn ops_of(s: &Subpolicy) -> impl Iterator<Item = usize> + '_ {
    s.steps().iter().map(|t| t.op.index())
}

/// Samples `m` pairs from `snap` and tallies their operations.
pub fn snapshot_stats<R: Rng + ?Sized>(snap: &PolicySnapshot, m: usize, rng: &mut R) -> Result<SnapshotStats> {
    if m == 0 {
        return Err(Error::OutOfRange("inspect needs at least one sample".into()));
    }
    let mut st = SnapshotStats {
        epoch: snap.epoch(),
        label: snap.label(),
        samples: m,
        pooled: [0; OPS],
        view1: [0; OPS],
        view2: [0; OPS],
        first_step: [[0; OPS]; OPS],
        any_step: [[0; OPS]; OPS],
    };
    let mut left = m;
    while left > 0 {
        let n = left.min(SAMPLE_CHUNK);
        for sp in snap.sample_batch(n, rng)? {
            let (v1, v2) = (&sp.pair.view1, &sp.pair.view2);
            for a in ops_of(v1) {
                st.view1[a] += 1;
                st.pooled[a] += 1;
                for b in ops_of(v2) {
                    st.any_step[a][b] += 1;
                }
            }
            for b in ops_of(v2) {
                st.view2[b] += 1;
                st.pooled[b] += 1;
            }
            let first = |s: &Subpolicy| s.steps()[0].op.index();
            st.first_step[first(v1)][first(v2)] += 1;
        }
        left -= n;
    }
    Ok(st)
}

fn freqs(counts: &[u64; OPS]) -> [f64; OPS] {
    let total: u64 = counts.iter().sum();
    let mut out = [0.0; OPS];
    for (o, c) in out.iter_mut().zip(counts) {
        *o = *c as f64 / total.max(1) as f64;
    }
    out
}

impl SnapshotStats {
    pub fn pooled_freqs(&self) -> [f64; OPS] {
        freqs(&self.pooled)
    }

    pub fn view1_freqs(&self) -> [f64; OPS] {
        freqs(&self.view1)
    }

    pub fn view2_freqs(&self) -> [f64; OPS] {
        freqs(&self.view2)
    }
}

/// Pearson chi-square statistic of independence for a contingency table and
/// its degrees of freedom; all-zero rows and columns are dropped.
pub fn chi_square_independence(table: &OpMatrix) -> (f64, usize) {
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..OPS).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let total: u64 = rows.iter().sum();
    if total == 0 {
        return (0.0, 0);
    }
    let mut stat = 0.0;
    for i in (0..OPS).filter(|&i| rows[i] > 0) {
        for j in (0..OPS).filter(|&j| cols[j] > 0) {
            let expected = rows[i] as f64 * cols[j] as f64 / total as f64;
            stat += (table[i][j] as f64 - expected).powi(2) / expected;
        }
    }
    let r = rows.iter().filter(|&&c| c > 0).count();
    let c = cols.iter().filter(|&&c| c > 0).count();
    (stat, (r.saturating_sub(1)) * (c.saturating_sub(1)))
}

pub fn op_probs_csv(stats: &[SnapshotStats]) -> String {
    let mut out = String::from("epoch,snapshot,op,pooled,view1,view2\n");
    for st in stats {
        let (p, a, b) = (st.pooled_freqs(), st.view1_freqs(), st.view2_freqs());
        for op in OpKind::ALL {
            let i = op.index();
            let _ = writeln!(out, "{},{},{},{},{},{}", st.epoch, st.label, op.name(), p[i], a[i], b[i]);
        }
    }
    out
}

pub fn cooccurrence_csv(stats: &[SnapshotStats]) -> String {
    let mut out = String::from("epoch,snapshot,steps,view1_op,view2_op,count\n");
    for st in stats {
        for (kind, m) in [("first", &st.first_step), ("any", &st.any_step)] {
            for a in OpKind::ALL {
                for b in OpKind::ALL {
                    let _ = writeln!(
                        out,
                        "{},{},{kind},{},{},{}",
                        st.epoch,
                        st.label,
                        a.name(),
                        b.name(),
                        m[a.index()][b.index()]
                    );
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyConfig, PolicyMode, PolicyNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snap(mode: PolicyMode) -> PolicySnapshot {
        let cfg = PolicyConfig {
            mode,
            ..PolicyConfig::default()
        };
        PolicyNet::new(cfg, 3).unwrap().snapshot(25)
    }

    #[test]
    fn totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = snapshot_stats(&snap(PolicyMode::CoViews), 1500, &mut rng).unwrap();
        let sum = |m: &OpMatrix| m.iter().flatten().sum::<u64>();
        assert_eq!(sum(&st.first_step), 1500);
        assert_eq!(sum(&st.any_step), 1500 * 4);
        assert_eq!(st.pooled.iter().sum::<u64>(), 1500 * 4);
        assert!((st.pooled_freqs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((st.view2_freqs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_of_product_table_is_zero() {
        let mut t = [[0u64; OPS]; OPS];
        let r = [1u64, 2, 3];
        let c = [4u64, 5];
        for i in 0..3 {
            for j in 0..2 {
                t[i][j] = r[i] * c[j];
            }
        }
        let (stat, dof) = chi_square_independence(&t);
        assert!(stat.abs() < 1e-12);
        assert_eq!(dof, 2);
        let mut diag = [[0u64; OPS]; OPS];
        diag[0][0] = 50;
        diag[1][1] = 50;
        let (stat, dof) = chi_square_independence(&diag);
        assert!((stat - 100.0).abs() < 1e-9);
        assert_eq!(dof, 1);
    }

    #[test]
    fn csv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = vec![snapshot_stats(&snap(PolicyMode::IndepViews), 100, &mut rng).unwrap()];
        assert_eq!(op_probs_csv(&st).lines().count(), 1 + 16);
        assert_eq!(cooccurrence_csv(&st).lines().count(), 1 + 2 * 256);
        assert!(op_probs_csv(&st).lines().nth(1).unwrap().starts_with("25,e25,"));
    }
}
