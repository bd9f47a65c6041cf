use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::ops::{OpKind, MAX_BIN, NUM_BINS};
use crate::error::{Error, Result};

/// Fixed probability with which every learned step fires.
pub const APPLY_PROB: f64 = 0.8;

/// Default number of steps per subpolicy.
pub const DEFAULT_N_TAU: usize = 2;

/// One `(operation, magnitude bin)` step of a subpolicy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformStep {
    pub op: OpKind,
    pub bin: u8,
    pub apply_prob: f64,
}

impl TransformStep {
    pub fn new(op: OpKind, bin: u8) -> Result<Self> {
        Self::with_prob(op, bin, APPLY_PROB)
    }

    pub fn with_prob(op: OpKind, bin: u8, apply_prob: f64) -> Result<Self> {
        if bin > MAX_BIN {
            return Err(Error::OutOfRange(format!(
                "magnitude bin {bin} not in 0..={MAX_BIN}"
            )));
        }
        if !(0.0..=1.0).contains(&apply_prob) {
            return Err(Error::OutOfRange(format!(
                "apply probability {apply_prob} not in [0, 1]"
            )));
        }
        Ok(Self { op, bin, apply_prob })
    }
}

impl fmt::Display for TransformStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.op, self.bin, self.apply_prob)
    }
}

impl FromStr for TransformStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [op, bin, prob] = parts.as_slice() else {
            return Err(Error::Parse(format!("expected op:bin:prob, got `{s}`")));
        };
        let bin = bin
            .parse::<u8>()
            .map_err(|e| Error::Parse(format!("bin `{bin}`: {e}")))?;
        let prob = prob
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("probability `{prob}`: {e}")))?;
        Self::with_prob(op.parse()?, bin, prob)
    }
}

/// Ordered augmentation program for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subpolicy {
    steps: Vec<TransformStep>,
}

impl Subpolicy {
    pub fn new(steps: Vec<TransformStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::OutOfRange("a subpolicy needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn from_indices(actions: &[(usize, usize)]) -> Result<Self> {
        let steps = actions
            .iter()
            .map(|&(op, bin)| {
                if bin >= NUM_BINS {
                    return Err(Error::OutOfRange(format!("magnitude bin {bin}")));
                }
                TransformStep::new(OpKind::from_index(op)?, bin as u8)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(op index, bin)` per step.
    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .map(|s| (s.op.index(), s.bin as usize))
            .collect()
    }
}

impl fmt::Display for Subpolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for Subpolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s.split(';').map(str::parse).collect::<Result<Vec<_>>>()?)
    }
}

/// The two subpolicies that produce the two views of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpolicyPair {
    pub view1: Subpolicy,
    pub view2: Subpolicy,
}

impl SubpolicyPair {
    pub fn new(view1: Subpolicy, view2: Subpolicy) -> Self {
        Self { view1, view2 }
    }
}

impl fmt::Display for SubpolicyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.view1, self.view2)
    }
}

impl FromStr for SubpolicyPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('|')
            .ok_or_else(|| Error::Parse(format!("expected `view1 | view2`, got `{s}`")))?;
        Ok(Self::new(a.trim().parse()?, b.trim().parse()?))
    }
}

/// `n_tau` steps with uniformly random operation and bin.
pub fn random_subpolicy<R: Rng + ?Sized>(n_tau: usize, rng: &mut R) -> Subpolicy {
    let steps = (0..n_tau.max(1))
        .map(|_| TransformStep {
            op: OpKind::ALL[rng.random_range(0..OpKind::COUNT)],
            bin: rng.random_range(0..NUM_BINS) as u8,
            apply_prob: APPLY_PROB,
        })
        .collect();
    Subpolicy { steps }
}

pub fn random_pair<R: Rng + ?Sized>(n_tau: usize, rng: &mut R) -> SubpolicyPair {
    let a = random_subpolicy(n_tau, rng);
    let b = random_subpolicy(n_tau, rng);
    SubpolicyPair::new(a, b)
}
