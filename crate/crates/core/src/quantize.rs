//! Deterministic binary and ternary weight quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    #[default]
    None,
    Binary,
    Ternary,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::None => "none",
            QuantMode::Binary => "binary",
            QuantMode::Ternary => "ternary",
        }
    }

    /// Bits per stored weight.
    pub fn weight_width_bits(self) -> u32 {
        match self {
            QuantMode::None => 32,
            QuantMode::Binary => 1,
            QuantMode::Ternary => 2,
        }
    }

    pub fn apply<T: Scalar>(self, w: T) -> T {
        match self {
            QuantMode::None => w,
            QuantMode::Binary => binarize_value(w),
            QuantMode::Ternary => ternarize_value(w),
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            QuantMode::None => 0,
            QuantMode::Binary => 1,
            QuantMode::Ternary => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(QuantMode::None),
            1 => Some(QuantMode::Binary),
            2 => Some(QuantMode::Ternary),
            _ => None,
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(QuantMode::None),
            "binary" => Ok(QuantMode::Binary),
            "ternary" => Ok(QuantMode::Ternary),
            other => Err(Error::InvalidConfig(format!("unknown quant mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which weights a pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Training forward/backward: quantized weights when a quant mode is set.
    Train,
    /// Inference with quantized weights.
    TestQuantized,
    /// Inference with the real-valued weights.
    TestReal,
}

#[inline]
pub fn binarize_value<T: Scalar>(w: T) -> T {
    if w >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

#[inline]
pub fn ternarize_value<T: Scalar>(w: T) -> T {
    let third = T::one() / T::of(3.0);
    if w >= third {
        T::one()
    } else if w <= -third {
        -T::one()
    } else {
        T::zero()
    }
}

/// `+1` where `w >= 0`, `-1` elsewhere.
pub fn binarize<T: Scalar>(w: &Matrix<T>) -> Matrix<T> {
    w.map(binarize_value)
}

/// `+1` where `w >= 1/3`, `-1` where `w <= -1/3`, `0` in between.
pub fn ternarize<T: Scalar>(w: &Matrix<T>) -> Matrix<T> {
    w.map(ternarize_value)
}

pub fn quantize<T: Scalar>(w: &Matrix<T>, mode: QuantMode) -> Matrix<T> {
    match mode {
        QuantMode::None => w.clone(),
        QuantMode::Binary => binarize(w),
        QuantMode::Ternary => ternarize(w),
    }
}

/// Quantizes per `phase` and zeroes masked positions.
pub fn masked_weights<T: Scalar>(
    w: &Matrix<T>,
    mask: &Matrix<T>,
    quant: QuantMode,
    phase: Phase,
) -> Result<Matrix<T>> {
    let mode = match phase {
        Phase::TestReal => QuantMode::None,
        Phase::Train | Phase::TestQuantized => quant,
    };
    // Select rather than multiply so masked entries are +0.0, never -0.0.
    w.zip_map(mask, "effective_weights", |x, m| {
        if m == T::zero() {
            T::zero()
        } else {
            mode.apply(x)
        }
    })
}

/// Clamps weights into `[-1, 1]`; no-op for real-valued layers.
pub fn clip_weights<T: Scalar>(w: &mut Matrix<T>, quant: QuantMode) {
    if quant == QuantMode::None {
        return;
    }
    for x in w.data_mut() {
        *x = x.max(-T::one()).min(T::one());
    }
}
