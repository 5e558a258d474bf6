//! Core value types: modality-tagged image tensors and attribute vectors.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const ATTRIBUTE_COUNT: usize = 10;

/// Fixed attribute ordering used everywhere (vectors, labels, CLI names).
pub const ATTRIBUTE_NAMES: [&str; ATTRIBUTE_COUNT] = [
    "Arched_Eyebrows",
    "Big_Lips",
    "Big_Nose",
    "Bushy_Eyebrows",
    "Male",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Mouth_Slightly_Open",
    "Young",
];

/// Indices into [`AttributeVector`] by name.
pub mod attr_index {
    pub const ARCHED_EYEBROWS: usize = 0;
    pub const BIG_LIPS: usize = 1;
    pub const BIG_NOSE: usize = 2;
    pub const BUSHY_EYEBROWS: usize = 3;
    pub const MALE: usize = 4;
    pub const MUSTACHE: usize = 5;
    pub const NARROW_EYES: usize = 6;
    pub const NO_BEARD: usize = 7;
    pub const MOUTH_SLIGHTLY_OPEN: usize = 8;
    pub const YOUNG: usize = 9;
}

/// Ten reals in [-1, 1]; sign encodes attribute presence. Ground-truth
/// labels are exactly +-1, predictor outputs fill the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub [f64; ATTRIBUTE_COUNT]);

impl AttributeVector {
    pub fn new(values: [f64; ATTRIBUTE_COUNT]) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || *v < -1.0 || *v > 1.0 {
                return Err(Error::invalid(format!(
                    "attribute {} = {v} outside [-1, 1]",
                    ATTRIBUTE_NAMES[i]
                )));
            }
        }
        Ok(AttributeVector(values))
    }

    /// Ground-truth labels from presence flags (+1 present, -1 absent).
    pub fn from_signs(signs: [bool; ATTRIBUTE_COUNT]) -> Self {
        let mut v = [0.0; ATTRIBUTE_COUNT];
        for (dst, &s) in v.iter_mut().zip(signs.iter()) {
            *dst = if s { 1.0 } else { -1.0 };
        }
        AttributeVector(v)
    }

    pub fn zeros() -> Self {
        AttributeVector([0.0; ATTRIBUTE_COUNT])
    }

    /// Case-insensitive attribute name lookup. Accepts `mouth_open` as an
    /// alias for `Mouth_Slightly_Open`.
    pub fn index_of(name: &str) -> Option<usize> {
        let lower = name.trim().to_ascii_lowercase();
        if lower == "mouth_open" {
            return Some(attr_index::MOUTH_SLIGHTLY_OPEN);
        }
        ATTRIBUTE_NAMES
            .iter()
            .position(|n| n.to_ascii_lowercase() == lower)
    }

    /// Parse a CLI attribute string like `"mustache=1,young=-1"`. Entries
    /// not named default to 0.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut values = [0.0; ATTRIBUTE_COUNT];
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("attribute entry `{part}` is not name=value")))?;
            let idx = Self::index_of(name)
                .ok_or_else(|| Error::invalid(format!("unknown attribute `{}`", name.trim())))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("attribute value `{value}` is not a number")))?;
            values[idx] = v;
        }
        Self::new(values)
    }

    pub fn with_entry(mut self, index: usize, value: f64) -> Result<Self> {
        if index >= ATTRIBUTE_COUNT {
            return Err(Error::invalid(format!("attribute index {index} out of range")));
        }
        if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("attribute value {value} outside [-1, 1]")));
        }
        self.0[index] = value;
        Ok(self)
    }

    pub fn to_array<T: Real>(&self) -> Array1<T> {
        Array1::from_iter(self.0.iter().map(|&v| T::of(v)))
    }
}

/// Image modality tag carried by every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// 3-channel visible-light image.
    Visible,
    /// 1-channel total-intensity thermal image.
    S0,
    /// 3-channel polarimetric stack (S0, S1, S2).
    Polar,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Visible | Modality::Polar => 3,
            Modality::S0 => 1,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Visible => write!(f, "visible"),
            Modality::S0 => write!(f, "s0"),
            Modality::Polar => write!(f, "polar"),
        }
    }
}

/// Channel-major (C, H, W) image with values in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor<T> {
    pub data: Array3<T>,
    pub modality: Modality,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(data: Array3<T>, modality: Modality) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != modality.channels() {
            return Err(Error::invalid(format!(
                "{modality} image must have {} channels, got {c}",
                modality.channels()
            )));
        }
        Ok(ImageTensor { data, modality })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_parse_and_alias() {
        let a = AttributeVector::parse("mustache=1, mouth_open=-0.5").unwrap();
        assert_eq!(a.0[attr_index::MUSTACHE], 1.0);
        assert_eq!(a.0[attr_index::MOUTH_SLIGHTLY_OPEN], -0.5);
        assert_eq!(a.0[attr_index::YOUNG], 0.0);
        assert!(AttributeVector::parse("nope=1").is_err());
        assert!(AttributeVector::parse("male=2").is_err());
    }

    #[test]
    fn modality_channel_check() {
        let ok = ImageTensor::new(Array3::<f32>::zeros((1, 4, 4)), Modality::S0);
        assert!(ok.is_ok());
        let bad = ImageTensor::new(Array3::<f32>::zeros((1, 4, 4)), Modality::Visible);
        assert!(bad.is_err());
    }
}
