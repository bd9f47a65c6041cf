//! One-layer LSTM controller with an operation head and a magnitude head.
//!
//! A pair is produced in `2·n_tau` recurrent steps: the first `n_tau` steps
//! emit the view-1 subpolicy, the rest emit view 2. Each step's input is the
//! concatenated embeddings of the previous step's `(operation, bin)`, or a
//! learned start token on the first step. Under [`PolicyMode::IndepViews`] the
//! recurrent state and input are reset to their initial values before view 2.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{OpKind, Subpolicy, SubpolicyPair, NUM_BINS};
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::policy::{ActionHistory, PolicyConfig, PolicyMode};

pub const NUM_OPS: usize = OpKind::COUNT;

#[derive(Debug, Clone, Copy)]
struct Ids {
    op_emb: ParamId,
    mag_emb: ParamId,
    start: ParamId,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    w_op: ParamId,
    b_op: ParamId,
    w_mag: ParamId,
    b_mag: ParamId,
}

/// A sampled pair with its log probability and summed per-step entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPair {
    pub pair: SubpolicyPair,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Graph outputs of one batched unroll.
#[derive(Debug)]
pub struct Unrolled {
    /// `[batch]` summed log probability of the chosen actions.
    pub log_prob: Var,
    /// `[batch]` summed categorical entropies (operation + magnitude).
    pub entropy: Var,
    /// Chosen `(op, bin)` per step, per batch row.
    pub actions: Vec<Vec<(usize, usize)>>,
    /// `[batch, 16]` operation logits per step.
    pub op_logits: Vec<Var>,
    /// `[batch, 11]` magnitude logits per step.
    pub mag_logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    cfg: PolicyConfig,
    params: ParamSet,
    ids: Ids,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n×n` orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, e) = (cfg.hidden, cfg.embed);
        let input = 2 * e;
        let mut params = ParamSet::new();
        let gauss = |shape: &[usize], scale: f64, rng: &mut ChaCha8Rng| {
            Tensor::from_fn(shape, |_| scale * normal(rng))
        };
        let op_emb = params.add("policy.op_emb", gauss(&[NUM_OPS, e], cfg.embed_init, &mut rng));
        let mag_emb = params.add("policy.mag_emb", gauss(&[NUM_BINS, e], cfg.embed_init, &mut rng));
        let start = params.add("policy.start", gauss(&[1, input], cfg.embed_init, &mut rng));

        let bound = cfg.input_init / (input as f64).sqrt();
        let w_x = params.add(
            "policy.lstm.w_x",
            Tensor::from_fn(&[input, 4 * h], |_| rng.random_range(-bound..=bound)),
        );
        // one orthogonal H×H block per gate, laid out as [H, 4H]
        let blocks: Vec<Vec<f64>> = (0..4).map(|_| orthogonal(h, &mut rng)).collect();
        let w_h = params.add(
            "policy.lstm.w_h",
            Tensor::from_fn(&[h, 4 * h], |i| {
                let (r, c) = (i / (4 * h), i % (4 * h));
                blocks[c / h][r * h + c % h]
            }),
        );
        let bias = params.add(
            "policy.lstm.bias",
            Tensor::from_fn(&[4 * h], |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }),
        );
        let hb = cfg.head_init;
        let head = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::from_fn(&[rows, cols], |_| {
                if hb > 0.0 {
                    rng.random_range(-hb..=hb)
                } else {
                    0.0
                }
            })
        };
        let w_op = params.add("policy.op_head.w", head(h, NUM_OPS, &mut rng));
        let b_op = params.add("policy.op_head.b", Tensor::zeros(&[NUM_OPS]));
        let w_mag = params.add("policy.mag_head.w", head(h, NUM_BINS, &mut rng));
        let b_mag = params.add("policy.mag_head.b", Tensor::zeros(&[NUM_BINS]));
        Ok(Self {
            cfg,
            params,
            ids: Ids {
                op_emb,
                mag_emb,
                start,
                w_x,
                w_h,
                bias,
                w_op,
                b_op,
                w_mag,
                b_mag,
            },
        })
    }

    /// Rebuilds a network around an existing parameter set.
    pub(crate) fn from_params(cfg: PolicyConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(cfg.clone(), 0)?;
        if !template.params.same_layout(&params) {
            return Err(Error::Checkpoint(
                "policy parameters do not match the configured architecture".into(),
            ));
        }
        Ok(Self {
            cfg,
            params,
            ids: template.ids,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn mode(&self) -> PolicyMode {
        self.cfg.mode
    }

    pub fn n_tau(&self) -> usize {
        self.cfg.n_tau
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the operation and magnitude embedding tables (not the start token).
    pub fn zero_embeddings(&mut self) {
        for id in [self.ids.op_emb, self.ids.mag_emb] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Runs `2·n_tau` (or `max_steps`) recurrent steps over `batch` rows.
    /// `choose(step, op_log_probs, mag_log_probs)` returns the actions taken
    /// at each step, one per row; the log-prob slices are `[batch, 16]` and
    /// `[batch, 11]` row-major.
    pub fn unroll<F>(
        &self,
        g: &mut Graph,
        batch: usize,
        max_steps: Option<usize>,
        mut choose: F,
    ) -> Result<Unrolled>
    where
        F: FnMut(usize, &[f64], &[f64]) -> Result<Vec<(usize, usize)>>,
    {
        let h_dim = self.cfg.hidden;
        let n_tau = self.cfg.n_tau;
        let steps = max_steps.unwrap_or(2 * n_tau).min(2 * n_tau);
        let p = |g: &mut Graph, id| g.param(&self.params, id);
        let (op_emb, mag_emb, start) = (p(g, self.ids.op_emb), p(g, self.ids.mag_emb), p(g, self.ids.start));
        let (w_x, w_h, bias) = (p(g, self.ids.w_x), p(g, self.ids.w_h), p(g, self.ids.bias));
        let (w_op, b_op) = (p(g, self.ids.w_op), p(g, self.ids.b_op));
        let (w_mag, b_mag) = (p(g, self.ids.w_mag), p(g, self.ids.b_mag));

        let mut h = g.constant_raw(vec![batch, h_dim], vec![0.0; batch * h_dim]);
        let mut c = h;
        let mut prev: Vec<(usize, usize)> = Vec::new();
        let mut actions = vec![Vec::with_capacity(steps); batch];
        let (mut lp_terms, mut ent_terms) = (Vec::new(), Vec::new());
        let (mut op_logits_all, mut mag_logits_all) = (Vec::new(), Vec::new());

        for t in 0..steps {
            let reset = t == 0 || (t == n_tau && self.cfg.mode == PolicyMode::IndepViews);
            let x = if reset {
                h = g.constant_raw(vec![batch, h_dim], vec![0.0; batch * h_dim]);
                c = h;
                g.repeat_rows(start, batch)?
            } else {
                let ops: Vec<usize> = prev.iter().map(|a| a.0).collect();
                let bins: Vec<usize> = prev.iter().map(|a| a.1).collect();
                let eo = g.embedding(op_emb, &ops)?;
                let em = g.embedding(mag_emb, &bins)?;
                g.concat(&[eo, em])?
            };
            let gx = g.matmul(x, w_x)?;
            let gh = g.matmul(h, w_h)?;
            let gates = g.add(gx, gh)?;
            let gates = g.add(gates, bias)?;
            let i_gate = g.slice_cols(gates, 0, h_dim)?;
            let f_gate = g.slice_cols(gates, h_dim, h_dim)?;
            let g_gate = g.slice_cols(gates, 2 * h_dim, h_dim)?;
            let o_gate = g.slice_cols(gates, 3 * h_dim, h_dim)?;
            let i_gate = g.sigmoid(i_gate);
            let f_gate = g.sigmoid(f_gate);
            let g_gate = g.tanh(g_gate);
            let o_gate = g.sigmoid(o_gate);
            let keep = g.mul(f_gate, c)?;
            let write = g.mul(i_gate, g_gate)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o_gate, tc)?;

            let ol = g.matmul(h, w_op)?;
            let ol = g.add(ol, b_op)?;
            let ml = g.matmul(h, w_mag)?;
            let ml = g.add(ml, b_mag)?;
            let op_lsm = g.log_softmax(ol);
            let mag_lsm = g.log_softmax(ml);

            let chosen = choose(t, g.value(op_lsm), g.value(mag_lsm))?;
            if chosen.len() != batch
                || chosen.iter().any(|&(o, m)| o >= NUM_OPS || m >= NUM_BINS)
            {
                return Err(Error::OutOfRange(format!(
                    "step {t}: expected {batch} actions with op < {NUM_OPS} and bin < {NUM_BINS}"
                )));
            }
            let ops: Vec<usize> = chosen.iter().map(|a| a.0).collect();
            let bins: Vec<usize> = chosen.iter().map(|a| a.1).collect();
            let lp_op = g.gather(op_lsm, &ops)?;
            let lp_mag = g.gather(mag_lsm, &bins)?;
            lp_terms.push(g.add(lp_op, lp_mag)?);
            ent_terms.push(self.entropy(g, op_lsm)?);
            ent_terms.push(self.entropy(g, mag_lsm)?);
            op_logits_all.push(ol);
            mag_logits_all.push(ml);
            for (row, a) in actions.iter_mut().zip(&chosen) {
                row.push(*a);
            }
            prev = chosen;
        }
        let log_prob = sum_all(g, &lp_terms)?;
        let entropy = sum_all(g, &ent_terms)?;
        Ok(Unrolled {
            log_prob,
            entropy,
            actions,
            op_logits: op_logits_all,
            mag_logits: mag_logits_all,
        })
    }

    /// `-Σ p log p` per row of a log-softmax output.
    fn entropy(&self, g: &mut Graph, lsm: Var) -> Result<Var> {
        let p = g.exp(lsm);
        let plogp = g.mul(p, lsm)?;
        let s = g.row_sum(plogp);
        Ok(g.scale(s, -1.0))
    }

    /// Samples `batch` pairs in one batched unroll.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<SampledPair>> {
        let mut g = Graph::inference();
        let out = self.unroll(&mut g, batch, None, |_, op_lsm, mag_lsm| {
            Ok((0..batch)
                .map(|r| {
                    let op = sample_categorical(&op_lsm[r * NUM_OPS..(r + 1) * NUM_OPS], rng);
                    let bin = sample_categorical(&mag_lsm[r * NUM_BINS..(r + 1) * NUM_BINS], rng);
                    (op, bin)
                })
                .collect())
        })?;
        let lp = g.value(out.log_prob).to_vec();
        let ent = g.value(out.entropy).to_vec();
        out.actions
            .iter()
            .enumerate()
            .map(|(r, acts)| {
                Ok(SampledPair {
                    pair: self.actions_to_pair(acts)?,
                    log_prob: lp[r],
                    entropy: ent[r],
                })
            })
            .collect()
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampledPair> {
        Ok(self.sample_batch(1, rng)?.remove(0))
    }

    fn actions_to_pair(&self, acts: &[(usize, usize)]) -> Result<SubpolicyPair> {
        let n = self.cfg.n_tau;
        Ok(SubpolicyPair::new(
            Subpolicy::from_indices(&acts[..n])?,
            Subpolicy::from_indices(&acts[n..2 * n])?,
        ))
    }

    fn pair_actions(&self, pair: &SubpolicyPair) -> Result<Vec<(usize, usize)>> {
        let n = self.cfg.n_tau;
        if pair.view1.len() != n || pair.view2.len() != n {
            return Err(Error::OutOfRange(format!(
                "pair has {}+{} steps, policy emits {n}+{n}",
                pair.view1.len(),
                pair.view2.len()
            )));
        }
        let mut acts = pair.view1.indices();
        acts.extend(pair.view2.indices());
        Ok(acts)
    }

    /// Teacher-forced log probability and entropy of `pairs`, as graph nodes
    /// so a loss can be differentiated through them.
    pub fn log_prob_graph(&self, g: &mut Graph, pairs: &[SubpolicyPair]) -> Result<(Var, Var)> {
        let acts = pairs
            .iter()
            .map(|p| self.pair_actions(p))
            .collect::<Result<Vec<_>>>()?;
        let out = self.unroll(g, pairs.len(), None, |t, _, _| {
            Ok(acts.iter().map(|a| a[t]).collect())
        })?;
        Ok((out.log_prob, out.entropy))
    }

    /// `(log_prob, entropy)` of one pair under the current parameters.
    pub fn log_prob_of(&self, pair: &SubpolicyPair) -> Result<(f64, f64)> {
        let mut g = Graph::inference();
        let (lp, ent) = self.log_prob_graph(&mut g, std::slice::from_ref(pair))?;
        Ok((g.scalar(lp), g.scalar(ent)))
    }

    /// Operation logits of the first view-2 step after teacher-forcing the
    /// view-1 steps with `history`.
    pub fn view2_logits(&self, history: &ActionHistory) -> Result<Vec<f64>> {
        let n = self.cfg.n_tau;
        if history.len() != n {
            return Err(Error::OutOfRange(format!(
                "view-1 history has {} actions, expected {n}",
                history.len()
            )));
        }
        let acts = history.actions().to_vec();
        let mut g = Graph::inference();
        let out = self.unroll(&mut g, 1, Some(n + 1), |t, _, _| {
            Ok(vec![acts.get(t).copied().unwrap_or((0, 0))])
        })?;
        Ok(g.value(out.op_logits[n]).to_vec())
    }

    /// Operation and magnitude probabilities of the very first step.
    pub fn first_step_probs(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let out = self.unroll(&mut g, 1, Some(1), |_, _, _| Ok(vec![(0, 0)]))?;
        let sm = |g: &mut Graph, v| {
            let s = g.softmax(v);
            g.value(s).to_vec()
        };
        let ops = sm(&mut g, out.op_logits[0]);
        let mags = sm(&mut g, out.mag_logits[0]);
        Ok((ops, mags))
    }
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}

/// Inverse-CDF draw from a row of log probabilities.
fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}
