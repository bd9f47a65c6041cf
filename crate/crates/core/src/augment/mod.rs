//! The discrete augmentation search space: 16 operations with 11 magnitude
//! levels each, subpolicies built from them, and their application to images.

pub mod image;
pub mod ops;
pub mod subpolicy;
pub mod transforms;

pub use image::Image;
pub use ops::{magnitude_value, MagnitudeMapping, OpKind, NUM_BINS};
pub use subpolicy::{
    random_pair, random_subpolicy, Subpolicy, SubpolicyPair, TransformStep, APPLY_PROB,
    DEFAULT_N_TAU,
};
pub use transforms::{apply_subpolicy, apply_subpolicy_with, apply_transform, apply_transform_with};
