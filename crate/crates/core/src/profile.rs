use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One piecewise-constant stretch of the environmental schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Segment start time in years.
    pub start: f64,
    /// Junction temperature in degrees Celsius.
    #[serde(rename = "S1")]
    pub s1: f64,
    /// Electrical stress (must be positive so its logarithm exists).
    #[serde(rename = "S2")]
    pub s2: f64,
}

/// Per-unit piecewise-constant schedule of junction temperature `S1(t)` and
/// electrical stress `S2(t)`. The last segment extends to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateProfile {
    #[serde(rename = "unit")]
    pub unit_id: usize,
    pub segments: Vec<Segment>,
}

impl CovariateProfile {
    pub fn new(unit_id: usize, segments: Vec<Segment>) -> Result<Self> {
        let p = CovariateProfile { unit_id, segments };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("profile must have at least one segment"));
        }
        if self.segments[0].start != 0.0 {
            return Err(Error::invalid("first segment must start at t = 0"));
        }
        for w in self.segments.windows(2) {
            if !(w[1].start > w[0].start) {
                return Err(Error::invalid("segment start times must be strictly increasing"));
            }
        }
        for s in &self.segments {
            if !(s.s2 > 0.0) {
                return Err(Error::invalid(format!(
                    "S2 must be positive on every segment, got {} at start {}",
                    s.s2, s.start
                )));
            }
            if !s.s1.is_finite() || !s.s2.is_finite() || !s.start.is_finite() {
                return Err(Error::invalid("segment fields must be finite"));
            }
        }
        Ok(())
    }

    fn segment_at(&self, t: f64) -> &Segment {
        // index of last segment with start <= t
        let ix = self.segments.partition_point(|s| s.start <= t);
        &self.segments[ix.saturating_sub(1)]
    }

    /// Arrhenius-transformed temperature covariate `Z1(t) = 1000 / (S1(t) + 273.15)`.
    pub fn z1(&self, t: f64) -> f64 {
        1000.0 / (self.segment_at(t).s1 + 273.15)
    }

    /// Log electrical stress covariate `Z2(t) = ln S2(t)`.
    pub fn z2(&self, t: f64) -> f64 {
        self.segment_at(t).s2.ln()
    }

    /// Acceleration factor `lambda(t) = exp(gamma1 Z1(t) + gamma2 Z2(t))`.
    pub fn lambda(&self, t: f64, gamma1: f64, gamma2: f64) -> f64 {
        (gamma1 * self.z1(t) + gamma2 * self.z2(t)).exp()
    }

    /// A constant-environment profile, useful for tests and nested-model checks.
    pub fn constant(unit_id: usize, s1: f64, s2: f64) -> Self {
        CovariateProfile { unit_id, segments: vec![Segment { start: 0.0, s1, s2 }] }
    }
}

/// Environmental acceleration factor `lambda_i(t)` with input validation.
pub fn covariate_link(profile: &CovariateProfile, t: f64, gamma1: f64, gamma2: f64) -> Result<f64> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::invalid(format!("time must be >= 0, got {t}")));
    }
    profile.validate()?;
    Ok(profile.lambda(t, gamma1, gamma2))
}
