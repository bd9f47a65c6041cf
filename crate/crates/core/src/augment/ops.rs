use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discrete magnitude levels per operation.
pub const NUM_BINS: usize = 11;
pub const MAX_BIN: u8 = (NUM_BINS - 1) as u8;

/// The 16 augmentation operations of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
    Identity,
}

impl OpKind {
    pub const COUNT: usize = 16;

    pub const ALL: [OpKind; 16] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::AutoContrast,
        OpKind::Invert,
        OpKind::Equalize,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Contrast,
        OpKind::Color,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::Cutout,
        OpKind::Identity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("operation index {i} not in 0..16")))
    }

    /// `(min, max)` magnitude range; `None` for magnitude-free operations.
    pub fn range(self) -> Option<(f64, f64)> {
        use OpKind::*;
        match self {
            ShearX | ShearY => Some((-0.3, 0.3)),
            TranslateX | TranslateY => Some((-0.45, 0.45)),
            Rotate => Some((-30.0, 30.0)),
            Solarize => Some((0.0, 256.0)),
            Posterize => Some((4.0, 8.0)),
            Contrast | Color | Brightness | Sharpness => Some((0.1, 1.9)),
            Cutout => Some((0.0, 0.2)),
            AutoContrast | Invert | Equalize | Identity => None,
        }
    }

    /// Ranges symmetric around zero (geometric operations).
    pub fn is_signed(self) -> bool {
        matches!(self.range(), Some((lo, hi)) if lo == -hi)
    }

    pub fn name(self) -> &'static str {
        use OpKind::*;
        match self {
            ShearX => "ShearX",
            ShearY => "ShearY",
            TranslateX => "TranslateX",
            TranslateY => "TranslateY",
            Rotate => "Rotate",
            AutoContrast => "AutoContrast",
            Invert => "Invert",
            Equalize => "Equalize",
            Solarize => "Solarize",
            Posterize => "Posterize",
            Contrast => "Contrast",
            Color => "Color",
            Brightness => "Brightness",
            Sharpness => "Sharpness",
            Cutout => "Cutout",
            Identity => "Identity",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Parse(format!("unknown operation `{s}`")))
    }
}

/// Magnitude of a discretized level, `min + bin·(max − min)/10`.
///
/// Returns `Ok(None)` for operations that ignore their magnitude.
pub fn magnitude_value(op: OpKind, bin: u8) -> Result<Option<f64>> {
    if bin > MAX_BIN {
        return Err(Error::OutOfRange(format!(
            "magnitude bin {bin} not in 0..={MAX_BIN}"
        )));
    }
    Ok(op
        .range()
        .map(|(lo, hi)| lo + bin as f64 * (hi - lo) / MAX_BIN as f64))
}

/// How bins of sign-symmetric ranges turn into applied magnitudes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeMapping {
    /// Bins span `[0, max]` and the sign is drawn uniformly when applied.
    #[default]
    SignRandomized,
    /// Bins span `[min, max]` directly, as in [`magnitude_value`].
    Direct,
}

impl FromStr for MagnitudeMapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign_randomized" => Ok(Self::SignRandomized),
            "direct" => Ok(Self::Direct),
            _ => Err(Error::Parse(format!("unknown magnitude mapping `{s}`"))),
        }
    }
}

impl fmt::Display for MagnitudeMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SignRandomized => "sign_randomized",
            Self::Direct => "direct",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_bins() {
        assert_eq!(magnitude_value(OpKind::Rotate, 5).unwrap(), Some(0.0));
        assert_eq!(magnitude_value(OpKind::Rotate, 10).unwrap(), Some(30.0));
        assert_eq!(magnitude_value(OpKind::Rotate, 0).unwrap(), Some(-30.0));
    }

    #[test]
    fn table_ranges() {
        assert_eq!(magnitude_value(OpKind::Solarize, 0).unwrap(), Some(0.0));
        assert_eq!(magnitude_value(OpKind::Solarize, 10).unwrap(), Some(256.0));
        assert_eq!(OpKind::Posterize.range(), Some((4.0, 8.0)));
        assert_eq!(OpKind::Cutout.range(), Some((0.0, 0.2)));
        assert_eq!(OpKind::TranslateY.range(), Some((-0.45, 0.45)));
        for op in [OpKind::AutoContrast, OpKind::Invert, OpKind::Equalize, OpKind::Identity] {
            assert_eq!(magnitude_value(op, 7).unwrap(), None);
        }
        let signed: Vec<_> = OpKind::ALL.iter().filter(|o| o.is_signed()).collect();
        assert_eq!(signed.len(), 5);
    }

    #[test]
    fn bin_out_of_range() {
        assert!(magnitude_value(OpKind::Rotate, 11).is_err());
    }

    #[test]
    fn names_round_trip() {
        for (i, op) in OpKind::ALL.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(op.name().parse::<OpKind>().unwrap(), *op);
        }
    }
}
