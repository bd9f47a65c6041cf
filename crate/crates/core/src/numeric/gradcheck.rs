//! Central finite-difference gradient checker, used as a test oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numeric::tensor::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are both ~0 compare as equal.
    pub floor: f64,
    /// Probe at most this many coordinates per parameter tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Max relative error per parameter name, in parameter order.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((name, err)) if *name == e.param => *err = err.max(e.rel_err),
                _ => out.push((e.param.clone(), e.rel_err)),
            }
        }
        out
    }

    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` per parameter name, in parameter
    /// order, over the probed coordinates.
    pub fn per_param_norm(&self, floor: f64) -> Vec<(String, f64)> {
        let mut acc: Vec<(String, [f64; 3])> = Vec::new();
        for e in &self.entries {
            if acc.last().is_none_or(|(name, _)| *name != e.param) {
                acc.push((e.param.clone(), [0.0; 3]));
            }
            let s = &mut acc.last_mut().expect("pushed above").1;
            s[0] += (e.analytic - e.numeric).powi(2);
            s[1] += e.analytic.powi(2);
            s[2] += e.numeric.powi(2);
        }
        acc.into_iter()
            .map(|(name, [d, a, n])| (name, d.sqrt() / a.sqrt().max(n.sqrt()).max(floor)))
            .collect()
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradients stored on `params` (missing ones count as zero)
/// with `(f(x+h) − f(x−h)) / 2h` coordinate by coordinate. `params` is
/// restored bit-exactly before returning.
pub fn finite_diff_check(
    params: &mut ParamSet,
    mut f: impl FnMut(&ParamSet) -> f64,
    cfg: FdConfig,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.get(id).numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let analytic = params.get(id).grad().map_or(0.0, |g| g[j]);
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + cfg.h;
            let fp = f(params);
            params.get_mut(id).data_mut()[j] = orig - cfg.h;
            let fm = f(params);
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            entries.push(FdEntry {
                param: params.name(id).to_string(),
                index: j,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, cfg.floor),
            });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    FdReport {
        passed: max_rel_err < cfg.tol && max_rel_err.is_finite(),
        entries,
        max_rel_err,
    }
}
