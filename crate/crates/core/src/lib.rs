pub mod augment;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod policy;
pub mod ppo;
pub mod queue;
pub mod reward;

pub use error::{Error, Result};
