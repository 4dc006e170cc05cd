//! Configuration documents and flat-file data exchange: the model JSON
//! document and the observation / path / reliability CSV formats.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Observation, ObservationSet};
use crate::error::{Error, Result};
use crate::model::Paths;
use crate::params::ModelParams;
use crate::profile::CovariateProfile;
use crate::reliability::ReliabilityConfig;

/// Top-level model document: parameters, per-unit environmental schedules,
/// and (optionally) the reliability-prediction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub params: ModelParams,
    pub profiles: Vec<CovariateProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability: Option<ReliabilityConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.profiles.is_empty() {
            return Err(Error::invalid("at least one profile required"));
        }
        for (ix, p) in self.profiles.iter().enumerate() {
            p.validate()?;
            if p.unit_id != ix + 1 {
                return Err(Error::invalid(format!(
                    "profiles must be listed as units 1..{} in order; entry {} has unit {}",
                    self.profiles.len(),
                    ix + 1,
                    p.unit_id
                )));
            }
        }
        if let Some(r) = &self.reliability {
            r.validate()?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    unit: usize,
    time: f64,
    level: f64,
}

/// Write observations as `unit,time,level` rows in (unit, time) order.
pub fn write_observations_csv<W: Write>(data: &ObservationSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for o in data.iter() {
        w.serialize(ObservationRow { unit: o.unit_id, time: o.time, level: o.level })?;
    }
    w.flush()?;
    Ok(())
}

/// Read `unit,time,level` rows. The unit count is the largest unit id seen
/// unless `n_units` pins it (for datasets whose last units are unobserved).
pub fn read_observations_csv<R: Read>(input: R, n_units: Option<usize>) -> Result<ObservationSet> {
    let mut r = csv::Reader::from_reader(input);
    let mut records = Vec::new();
    let mut max_unit = 0usize;
    for row in r.deserialize::<ObservationRow>() {
        let row = row?;
        max_unit = max_unit.max(row.unit);
        records.push(Observation { unit_id: row.unit, time: row.time, level: row.level });
    }
    let n = n_units.unwrap_or(max_unit);
    if n == 0 {
        return Err(Error::invalid("observation CSV contains no rows and no unit count was supplied"));
    }
    ObservationSet::new(n, records)
}

/// Write simulated paths as `path,unit,time,level` rows.
pub fn write_paths_csv<W: Write>(paths: &Paths, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "unit", "time", "level"])?;
    for p in 0..paths.n_paths {
        for u in 0..paths.n_units {
            for (k, &t) in paths.grid.iter().enumerate() {
                w.write_record(&[
                    (p + 1).to_string(),
                    (u + 1).to_string(),
                    format_float(t),
                    format_float(paths.value(p, u, k)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub unit: usize,
    pub horizon: f64,
    pub reliability: f64,
}

/// Write per-unit reliability curves as `unit,horizon,reliability` rows.
pub fn write_reliability_csv<W: Write>(rows: &[ReliabilityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reliability_csv<R: Read>(input: R) -> Result<Vec<ReliabilityRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize::<ReliabilityRow>() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Shortest round-trip decimal representation; keeps CSV output byte-stable.
pub fn format_float(x: f64) -> String {
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
