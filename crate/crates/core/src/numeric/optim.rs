use crate::error::{Error, Result};
use crate::numeric::tensor::ParamSet;

/// Adam optimizer state: per-parameter first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update and zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for id in params.ids() {
            if params.get(id).grad().is_none() {
                return Err(Error::MissingGrad(params.name(id).to_string()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config(
                "Adam state was built for a different parameter set".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = t.grad().expect("checked above").to_vec();
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        for id in params.ids() {
            if params.get(id).grad().is_none() {
                return Err(Error::MissingGrad(params.name(id).to_string()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for (i, t) in params.tensors_mut().enumerate() {
            let vel = &mut self.velocity[i];
            let g = t.grad().expect("checked above").to_vec();
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let d = g[j] + self.weight_decay * *p;
                vel[j] = self.momentum * vel[j] + d;
                *p -= lr * vel[j];
            }
            t.zero_grad();
        }
        Ok(())
    }
}
