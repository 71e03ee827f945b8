//! NEHRP site classes from Vs30.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered softest to stiffest, so `Ord` follows stiffness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteClass {
    E,
    D,
    C,
    B,
    A,
}

impl SiteClass {
    /// Report order, stiffest first.
    pub const REPORT_ORDER: [SiteClass; 5] = [SiteClass::A, SiteClass::B, SiteClass::C, SiteClass::D, SiteClass::E];

    pub fn letter(self) -> &'static str {
        match self {
            SiteClass::A => "A",
            SiteClass::B => "B",
            SiteClass::C => "C",
            SiteClass::D => "D",
            SiteClass::E => "E",
        }
    }
}

impl fmt::Display for SiteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

/// Lower edges of D, C, B and A in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct ClassBoundaries([f64; 4]);

impl Default for ClassBoundaries {
    fn default() -> Self {
        Self([180.0, 360.0, 760.0, 1500.0])
    }
}

impl ClassBoundaries {
    pub fn new(thresholds: [f64; 4]) -> Result<Self> {
        let ok = thresholds[0] > 0.0
            && thresholds.iter().all(|t| t.is_finite())
            && thresholds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!(
                "site-class thresholds must be positive and strictly increasing, got {thresholds:?}"
            )));
        }
        Ok(Self(thresholds))
    }

    pub fn thresholds(&self) -> [f64; 4] {
        self.0
    }
}

impl TryFrom<[f64; 4]> for ClassBoundaries {
    type Error = Error;
    fn try_from(t: [f64; 4]) -> Result<Self> {
        Self::new(t)
    }
}

impl From<ClassBoundaries> for [f64; 4] {
    fn from(b: ClassBoundaries) -> Self {
        b.0
    }
}

/// A value on a boundary belongs to the stiffer class.
pub fn classify(vs30: f64, bounds: &ClassBoundaries) -> Result<SiteClass> {
    if !(vs30 > 0.0 && vs30.is_finite()) {
        return Err(Error::Config(format!("vs30 must be positive and finite, got {vs30}")));
    }
    const BY_RANK: [SiteClass; 5] = [SiteClass::E, SiteClass::D, SiteClass::C, SiteClass::B, SiteClass::A];
    let rank = bounds.0.iter().filter(|&&t| vs30 >= t).count();
    Ok(BY_RANK[rank])
}
