use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One degradation measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub unit_id: usize,
    pub time: f64,
    pub level: f64,
}

/// The complete dataset `{(i, t_ij, x_ij)}` with per-unit strictly increasing
/// time grids. Units are indexed 1..=L; units with no observations are allowed
/// (they simply contribute nothing to the likelihood).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_units: usize,
    /// Per-unit sorted (time, level) pairs, index 0 holds unit 1.
    by_unit: Vec<Vec<(f64, f64)>>,
}

impl ObservationSet {
    pub fn new(n_units: usize, records: impl IntoIterator<Item = Observation>) -> Result<Self> {
        if n_units == 0 {
            return Err(Error::invalid("unit count must be >= 1"));
        }
        let mut by_unit = vec![Vec::new(); n_units];
        for r in records {
            if r.unit_id == 0 || r.unit_id > n_units {
                return Err(Error::invalid(format!(
                    "unit id {} outside 1..={}",
                    r.unit_id, n_units
                )));
            }
            if !(r.time > 0.0) || !r.time.is_finite() {
                return Err(Error::invalid(format!("observation time must be > 0, got {}", r.time)));
            }
            if !r.level.is_finite() {
                return Err(Error::invalid("observation level must be finite"));
            }
            by_unit[r.unit_id - 1].push((r.time, r.level));
        }
        for obs in &mut by_unit {
            obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in obs.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::invalid(format!(
                        "duplicate observation time {} within a unit",
                        w[1].0
                    )));
                }
            }
        }
        Ok(ObservationSet { n_units, by_unit })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    /// Total number of measurements M.
    pub fn len(&self) -> usize {
        self.by_unit.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted observation times of the given unit (1-based id).
    pub fn times(&self, unit_id: usize) -> Vec<f64> {
        self.by_unit[unit_id - 1].iter().map(|&(t, _)| t).collect()
    }

    /// Observation levels of the given unit, in time order.
    pub fn levels(&self, unit_id: usize) -> Vec<f64> {
        self.by_unit[unit_id - 1].iter().map(|&(_, x)| x).collect()
    }

    pub fn last_observation(&self, unit_id: usize) -> Option<(f64, f64)> {
        self.by_unit[unit_id - 1].last().copied()
    }

    pub fn contains(&self, unit_id: usize, time: f64) -> bool {
        self.by_unit[unit_id - 1].iter().any(|&(t, _)| t == time)
    }

    /// Iterate all records in (unit, time) order.
    pub fn iter(&self) -> impl Iterator<Item = Observation> + '_ {
        self.by_unit.iter().enumerate().flat_map(|(i, obs)| {
            obs.iter().map(move |&(time, level)| Observation { unit_id: i + 1, time, level })
        })
    }

    /// Stacked observation vector y = (x_1^T, ..., x_L^T)^T.
    pub fn stacked_levels(&self) -> Vec<f64> {
        self.iter().map(|o| o.level).collect()
    }

    /// Per-unit time grids, for covariance assembly.
    pub fn time_grids(&self) -> Vec<Vec<f64>> {
        (1..=self.n_units).map(|u| self.times(u)).collect()
    }

    pub fn push(&mut self, obs: Observation) -> Result<()> {
        if obs.unit_id == 0 || obs.unit_id > self.n_units {
            return Err(Error::invalid(format!("unit id {} outside 1..={}", obs.unit_id, self.n_units)));
        }
        if !(obs.time > 0.0) {
            return Err(Error::invalid("observation time must be > 0"));
        }
        let v = &mut self.by_unit[obs.unit_id - 1];
        if let Some(&(last, _)) = v.last() {
            if obs.time <= last {
                return Err(Error::invalid(format!(
                    "new observation at t={} does not extend unit {} past t={}",
                    obs.time, obs.unit_id, last
                )));
            }
        }
        v.push((obs.time, obs.level));
        Ok(())
    }
}
