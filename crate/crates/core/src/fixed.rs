//! Binary fixed-point numbers used for every protocol-visible quantity.
//!
//! Values are stored as a signed 64-bit integer scaled by `2^-FRAC_BITS`, so
//! arithmetic is exact (or rounds in a documented direction) and two providers
//! that compute the same thing always produce the same bytes.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of fractional bits.
pub const FRAC_BITS: u32 = 20;

const ONE_RAW: i64 = 1 << FRAC_BITS;
const FRAC_MASK: i64 = ONE_RAW - 1;
// 10^20 / 2^20, so a fractional raw value times this is its exact decimal expansion.
const FIVE_POW_20: u128 = 95_367_431_640_625;
const MAX_FRAC_DIGITS: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFixedError {
    #[error("empty number")]
    Empty,
    #[error("invalid character in number `{0}`")]
    InvalidDigit(String),
    #[error("number `{0}` out of range")]
    OutOfRange(String),
}

/// A fixed-point number with [`FRAC_BITS`] fractional bits.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fixed(i64);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);
    pub const ONE: Fixed = Fixed(ONE_RAW);
    /// Smallest positive value.
    pub const EPSILON: Fixed = Fixed(1);
    pub const MAX: Fixed = Fixed(i64::MAX);

    pub const fn from_raw(raw: i64) -> Self {
        Fixed(raw)
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    pub const fn from_int(v: i64) -> Self {
        Fixed(v << FRAC_BITS)
    }

    /// Nearest grid value to `v` (ties away from zero). Only for non-protocol
    /// inputs such as configuration and reporting.
    pub fn from_f64(v: f64) -> Self {
        Fixed((v * ONE_RAW as f64).round() as i64)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }

    pub const fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Product rounded toward negative infinity.
    pub fn mul_floor(self, rhs: Fixed) -> Fixed {
        let wide = self.0 as i128 * rhs.0 as i128;
        Fixed((wide >> FRAC_BITS) as i64)
    }

    /// Product rounded toward positive infinity.
    pub fn mul_ceil(self, rhs: Fixed) -> Fixed {
        let wide = self.0 as i128 * rhs.0 as i128;
        Fixed((-((-wide) >> FRAC_BITS)) as i64)
    }

    /// `(self + other) / 2`, rounded down.
    pub fn midpoint(self, other: Fixed) -> Fixed {
        Fixed(((self.0 as i128 + other.0 as i128) >> 1) as i64)
    }

    pub fn max(self, other: Fixed) -> Fixed {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn min(self, other: Fixed) -> Fixed {
        if self <= other {
            self
        } else {
            other
        }
    }

    /// Fractional part as a value in `[0, 1)`, i.e. reduction modulo one.
    pub fn fract(self) -> Fixed {
        Fixed(self.0 & FRAC_MASK)
    }

    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 8]) -> Self {
        Fixed(i64::from_le_bytes(bytes))
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, rhs: Fixed) -> Fixed {
        Fixed(self.0 + rhs.0)
    }
}

impl AddAssign for Fixed {
    fn add_assign(&mut self, rhs: Fixed) {
        self.0 += rhs.0;
    }
}

impl Sub for Fixed {
    type Output = Fixed;
    fn sub(self, rhs: Fixed) -> Fixed {
        Fixed(self.0 - rhs.0)
    }
}

impl SubAssign for Fixed {
    fn sub_assign(&mut self, rhs: Fixed) {
        self.0 -= rhs.0;
    }
}

impl Neg for Fixed {
    type Output = Fixed;
    fn neg(self) -> Fixed {
        Fixed(-self.0)
    }
}

impl Sum for Fixed {
    fn sum<I: Iterator<Item = Fixed>>(iter: I) -> Fixed {
        iter.fold(Fixed::ZERO, |a, b| a + b)
    }
}

impl<'a> Sum<&'a Fixed> for Fixed {
    fn sum<I: Iterator<Item = &'a Fixed>>(iter: I) -> Fixed {
        iter.fold(Fixed::ZERO, |a, b| a + *b)
    }
}

/// Exact decimal expansion, trailing zeros trimmed.
impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let neg = self.0 < 0;
        let mag = (self.0 as i128).unsigned_abs();
        let int = mag >> FRAC_BITS;
        let frac = (mag & FRAC_MASK as u128) * FIVE_POW_20;
        if neg {
            f.write_str("-")?;
        }
        if frac == 0 {
            return write!(f, "{int}");
        }
        let digits = format!("{frac:020}");
        write!(f, "{int}.{}", digits.trim_end_matches('0'))
    }
}

impl fmt::Debug for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Parses a decimal string, rounding to the nearest grid point (ties up).
impl FromStr for Fixed {
    type Err = ParseFixedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        if body.is_empty() || body == "." {
            return Err(ParseFixedError::Empty);
        }
        let (int_str, frac_str) = body.split_once('.').unwrap_or((body, ""));
        if !int_str.bytes().chain(frac_str.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(ParseFixedError::InvalidDigit(s.to_string()));
        }
        let out_of_range = || ParseFixedError::OutOfRange(s.to_string());
        let int: i128 = if int_str.is_empty() {
            0
        } else {
            int_str.parse().map_err(|_| out_of_range())?
        };
        let frac_digits = &frac_str[..frac_str.len().min(MAX_FRAC_DIGITS)];
        let mut frac_raw: i128 = 0;
        if !frac_digits.is_empty() {
            let num: u128 = frac_digits.parse().map_err(|_| out_of_range())?;
            let den = 10u128.pow(frac_digits.len() as u32);
            // round(num * 2^F / den), computed without overflow for 30 digits
            let scaled = num.checked_mul(1 << FRAC_BITS).ok_or_else(out_of_range)?;
            frac_raw = ((scaled + den / 2) / den) as i128;
        }
        let raw = int
            .checked_mul(ONE_RAW as i128)
            .and_then(|v| v.checked_add(frac_raw))
            .ok_or_else(out_of_range)?;
        let raw = if neg { -raw } else { raw };
        i64::try_from(raw).map(Fixed).map_err(|_| out_of_range())
    }
}

impl Serialize for Fixed {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fixed {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Shorthand for literals in tests and configuration: `fx("0.25")`.
///
/// Panics on malformed input.
pub fn fx(s: &str) -> Fixed {
    s.parse()
        .unwrap_or_else(|e| panic!("bad fixed-point literal {s:?}: {e}"))
}
