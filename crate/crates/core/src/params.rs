use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full parameter vector of the degradation model.
///
/// The diffusion coefficient is reparameterized as `kappa = sigma / tau_a`.
/// When `tau_a2 == 0` (fixed-effects special case) that ratio is undefined, so
/// the diffusion may instead be supplied directly through `sigma_override`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Time-transform exponent in `Lambda(t) = t^alpha`.
    pub alpha: f64,
    /// Mean of the unit-specific random drift coefficient.
    pub mu_a: f64,
    /// Variance of the random drift coefficient.
    pub tau_a2: f64,
    /// Reparameterized diffusion, `sigma / tau_a`.
    pub kappa: f64,
    /// Thermal acceleration coefficient.
    pub gamma1: f64,
    /// Electrical acceleration coefficient.
    pub gamma2: f64,
    /// Correlation between adjacent units' drift coefficients.
    pub rho: f64,
    /// Direct diffusion coefficient, used only when `tau_a2 == 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_override: Option<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.tau_a2 >= 0.0 && self.tau_a2.is_finite()) {
            return Err(Error::invalid(format!("tau_a2 must be >= 0, got {}", self.tau_a2)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !self.mu_a.is_finite() || !self.gamma1.is_finite() || !self.gamma2.is_finite() {
            return Err(Error::invalid("mu_a and gamma coefficients must be finite"));
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("sigma_override must be >= 0, got {s}")));
            }
        }
        if !self.sigma().is_finite() {
            return Err(Error::invalid("derived sigma is not finite"));
        }
        Ok(())
    }

    /// Diffusion coefficient `sigma = kappa * sqrt(tau_a2)`, or the explicit
    /// override in the degenerate `tau_a2 = 0` case.
    pub fn sigma(&self) -> f64 {
        match self.sigma_override {
            Some(s) => s,
            None => self.kappa * self.tau_a2.sqrt(),
        }
    }

    pub fn sigma2(&self) -> f64 {
        let s = self.sigma();
        s * s
    }
}

/// Time transform `Lambda(t) = t^alpha`.
pub fn time_transform(t: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    if t < 0.0 || !t.is_finite() {
        return Err(Error::invalid(format!("time must be >= 0, got {t}")));
    }
    Ok(t.powf(alpha))
}
