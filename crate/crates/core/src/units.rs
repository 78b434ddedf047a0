//! Fixed-point electrical quantities.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Active power in integer milliwatts.
///
/// Knowledge-base deltas are on the 0.1 W scale, so everything that is
/// compared against a threshold is kept in fixed point to stay bit-stable.
/// Serialized as decimal watts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Power(i64);

impl Power {
    pub const ZERO: Power = Power(0);

    pub const fn from_milliwatts(mw: i64) -> Self {
        Power(mw)
    }

    /// Rounds to the nearest milliwatt.
    pub fn from_watts(w: f64) -> Self {
        Power((w * 1000.0).round() as i64)
    }

    pub const fn milliwatts(self) -> i64 {
        self.0
    }

    pub fn watts(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub const fn abs(self) -> Self {
        Power(self.0.abs())
    }

    pub fn scale(self, factor: f64) -> Self {
        Power((self.0 as f64 * factor).round() as i64)
    }
}

impl Add for Power {
    type Output = Power;
    fn add(self, rhs: Power) -> Power {
        Power(self.0 + rhs.0)
    }
}

impl AddAssign for Power {
    fn add_assign(&mut self, rhs: Power) {
        self.0 += rhs.0;
    }
}

impl Sub for Power {
    type Output = Power;
    fn sub(self, rhs: Power) -> Power {
        Power(self.0 - rhs.0)
    }
}

impl SubAssign for Power {
    fn sub_assign(&mut self, rhs: Power) {
        self.0 -= rhs.0;
    }
}

impl Neg for Power {
    type Output = Power;
    fn neg(self) -> Power {
        Power(-self.0)
    }
}

impl Sum for Power {
    fn sum<I: Iterator<Item = Power>>(iter: I) -> Power {
        iter.fold(Power::ZERO, Add::add)
    }
}

impl fmt::Display for Power {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", abs / 1000, abs % 1000)
    }
}

impl Serialize for Power {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.watts())
    }
}

impl<'de> Deserialize<'de> for Power {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = f64::deserialize(d)?;
        if !w.is_finite() {
            return Err(serde::de::Error::custom("power must be finite"));
        }
        Ok(Power::from_watts(w))
    }
}

/// Formats a value held in thousandths as a decimal with 1 to 3 fractional digits.
pub(crate) fn format_milli(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let abs = v.unsigned_abs();
    let frac = format!("{:03}", abs % 1000);
    let frac = frac.trim_end_matches('0');
    let frac = if frac.is_empty() { "0" } else { frac };
    format!("{sign}{}.{frac}", abs / 1000)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_and_watts() {
        assert_eq!(Power::from_milliwatts(-350).to_string(), "-0.350");
        assert_eq!(Power::from_watts(45.8).milliwatts(), 45_800);
        assert_eq!(Power::from_milliwatts(54_000).watts(), 54.0);
    }

    #[test]
    fn milli_formatting() {
        assert_eq!(format_milli(230_000), "230.0");
        assert_eq!(format_milli(950), "0.95");
        assert_eq!(format_milli(229_885), "229.885");
        assert_eq!(format_milli(1000), "1.0");
    }

    #[test]
    fn serde_as_watts() {
        let json = serde_json::to_string(&Power::from_milliwatts(45_450)).unwrap();
        assert_eq!(json, "45.45");
        let back: Power = serde_json::from_str(&json).unwrap();
        assert_eq!(back.milliwatts(), 45_450);
    }
}
