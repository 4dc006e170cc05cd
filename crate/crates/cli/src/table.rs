//! Aggregated study results: the per-method error table, its JSON and
//! plot-data serializations, and the configuration fingerprint.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spatiodeg::config::format_float;
use spatiodeg::error::{Error, Result};

use crate::scenario::{Method, ScenarioConfig};

/// SHA-256 of the canonical JSON encoding of the scenario configuration.
pub fn config_hash(config: &ScenarioConfig) -> String {
    let canonical = serde_json::to_string(config).expect("scenario serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Per-method aggregate over replications. Error entries are None at horizons
/// excluded because the true reliability there is too small to divide by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodErrors {
    pub method: Method,
    /// Mean over replications of the unit-averaged relative prediction error,
    /// in percent, one entry per horizon.
    pub mean_rel_err_pct: Vec<Option<f64>>,
    /// Mean predicted joint (series-system) reliability curve.
    pub system_curve: Vec<f64>,
    /// Mean predicted per-unit reliability, averaged over units.
    pub mean_unit_curve: Vec<f64>,
    pub failed_reps: usize,
    pub mean_observations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub horizons: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    pub config_hash: String,
    /// Horizons dropped from the relative-error summaries.
    pub excluded_horizons: Vec<f64>,
    pub true_system_curve: Vec<f64>,
    pub true_mean_unit_curve: Vec<f64>,
    pub methods: Vec<MethodErrors>,
}

/// One tidy row of the plot-data export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: String,
    pub horizon: f64,
    pub statistic: String,
    pub value: f64,
    pub config_hash: String,
}

impl ErrorTable {
    pub fn method(&self, m: Method) -> Option<&MethodErrors> {
        self.methods.iter().find(|e| e.method == m)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Long-format CSV with one statistic per row, ready for plotting tools.
    pub fn emit_plotdata<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "horizon", "statistic", "value", "config_hash"])?;
        let mut put = |method: &str, h: f64, stat: &str, value: f64| -> Result<()> {
            w.write_record([
                method,
                &format_float(h),
                stat,
                &format_float(value),
                &self.config_hash,
            ])?;
            Ok(())
        };
        for (k, &h) in self.horizons.iter().enumerate() {
            put("truth", h, "system_reliability", self.true_system_curve[k])?;
            put("truth", h, "unit_reliability", self.true_mean_unit_curve[k])?;
        }
        for m in &self.methods {
            for (k, &h) in self.horizons.iter().enumerate() {
                if let Some(e) = m.mean_rel_err_pct[k] {
                    put(m.method.label(), h, "rel_err_pct", e)?;
                }
                put(m.method.label(), h, "system_reliability", m.system_curve[k])?;
                put(m.method.label(), h, "unit_reliability", m.mean_unit_curve[k])?;
            }
        }
        Ok(())
    }

    /// Fixed-width text rendering of the relative-error table.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "replications={} seed={} config={}\n",
            self.replications, self.master_seed, &self.config_hash[..12]
        ));
        s.push_str(&format!("{:>9}", "horizon"));
        for m in &self.methods {
            s.push_str(&format!("{:>12}", format!("{} err%", m.method.label())));
        }
        s.push('\n');
        for (k, &h) in self.horizons.iter().enumerate() {
            s.push_str(&format!("{h:>9.3}"));
            for m in &self.methods {
                match m.mean_rel_err_pct[k] {
                    Some(e) => s.push_str(&format!("{e:>12.4}")),
                    None => s.push_str(&format!("{:>12}", "-")),
                }
            }
            s.push('\n');
        }
        for m in &self.methods {
            s.push_str(&format!(
                "{}: mean observations {:.1}, failed replications {}\n",
                m.method.label(),
                m.mean_observations,
                m.failed_reps
            ));
        }
        s
    }
}

pub fn parse_plotdata<R: Read>(input: R) -> Result<Vec<PlotRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<PlotRow>() {
        rows.push(rec.map_err(|e| Error::invalid(format!("bad plot-data row: {e}")))?);
    }
    Ok(rows)
}
