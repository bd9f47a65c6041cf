use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

/// InfoNCE over `z = [Z1; Z2]`, a `[2N, D]` stack where row `i` and row
/// `i + N` are the two views of item `i`.
///
/// Every anchor is scored against the other `2N − 1` rows with cosine
/// similarity over `tau`; the positive stays in the denominator. The result
/// is the mean of the `2N` per-anchor terms.
pub fn info_nce_stacked(g: &mut Graph, z: Var, n: usize, tau: f64) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != 2 * n || n == 0 {
        return Err(Error::InvalidShape {
            op: "info_nce",
            shape,
            reason: "expected [2N, D] with N >= 1",
        });
    }
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!("temperature {tau} must be > 0")));
    }
    let rows = 2 * n;
    let u = g.l2_normalize_rows(z)?;
    let ut = g.transpose(u)?;
    let sim = g.matmul(u, ut)?;
    let logits = g.scale(sim, 1.0 / tau);
    let mut mask = vec![0.0; rows * rows];
    for i in 0..rows {
        mask[i * rows + i] = f64::NEG_INFINITY;
    }
    let mask = g.constant_raw(vec![rows, rows], mask);
    let logits = g.add(logits, mask)?;
    let lsm = g.log_softmax(logits);
    let positives: Vec<usize> = (0..rows).map(|i| (i + n) % rows).collect();
    let picked = g.gather(lsm, &positives)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// InfoNCE of two aligned `[N, D]` view batches.
pub fn info_nce(g: &mut Graph, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: s1,
            right: s2,
        });
    }
    let z = g.concat_rows(&[z1, z2])?;
    info_nce_stacked(g, z, s1[0], tau)
}

/// Convenience wrapper over row-major `[N, D]` buffers.
pub fn info_nce_value(z1: &[f64], z2: &[f64], n: usize, d: usize, tau: f64) -> Result<f64> {
    if z1.len() != n * d || z2.len() != n * d {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: vec![z1.len()],
            right: vec![n * d],
        });
    }
    let mut g = Graph::inference();
    let a = g.constant_raw(vec![n, d], z1.to_vec());
    let b = g.constant_raw(vec![n, d], z2.to_vec());
    let l = info_nce(&mut g, a, b, tau)?;
    Ok(g.scalar(l))
}
