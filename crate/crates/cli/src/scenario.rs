//! Study configuration: the engineering observation schedule, the scenario
//! flag set, the per-method observation plans, and shipped defaults for the
//! synthetic and the twelve-unit case studies.

use serde::{Deserialize, Serialize};

use spatiodeg::error::{Error, Result};
use spatiodeg::params::ModelParams;
use spatiodeg::profile::{CovariateProfile, Segment};
use spatiodeg::spatial::{optimize_design, Algorithm, ObservationMatrix, SearchConfig};

/// All observation times live on this lattice (years).
pub const TICK: f64 = 0.05;
/// End of the observation campaign (years).
pub const DESIGN_LIFE: f64 = 10.0;

pub fn tick_of(t: f64) -> usize {
    (t / TICK).round() as usize
}

pub fn time_of(tick: usize) -> f64 {
    tick as f64 * TICK
}

/// The fixed engineering schedule: semi-annual initial epochs over the first
/// five years, then six semi-annual and eight quarterly windows up to the
/// design life.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeringPlan {
    pub initial_epochs: Vec<f64>,
    pub later_windows: Vec<(f64, f64)>,
}

pub fn engineering_plan() -> EngineeringPlan {
    let initial_epochs: Vec<f64> = (1..=10).map(|k| 0.5 * k as f64).collect();
    let mut later_windows = Vec::new();
    for k in 0..6 {
        later_windows.push((5.0 + 0.5 * k as f64, 5.5 + 0.5 * k as f64));
    }
    for k in 0..8 {
        later_windows.push((8.0 + 0.25 * k as f64, 8.25 + 0.25 * k as f64));
    }
    EngineeringPlan { initial_epochs, later_windows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    M0,
    M1,
    M2,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::M0 => "m0",
            Method::M1 => "m1",
            Method::M2 => "m2",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "m0" => Ok(Method::M0),
            "m1" => Ok(Method::M1),
            "m2" => Ok(Method::M2),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

/// Optimizer budgets for the estimation steps inside a replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBudget {
    pub initial_starts: usize,
    pub initial_evals: usize,
    pub refit_evals: usize,
    pub final_starts: usize,
    pub final_evals: usize,
}

impl Default for FitBudget {
    fn default() -> Self {
        FitBudget { initial_starts: 6, initial_evals: 500, refit_evals: 200, final_starts: 4, final_evals: 700 }
    }
}

/// One synthetic or real-case study definition. Flags follow the four binary
/// toggles: s1 path shape (0 concave alpha=0.5, 1 convex alpha=1.2), s2
/// initial-phase unit selection, s3 windowed sampling plan, s4 shape
/// parameter known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub s1: u8,
    pub s2: u8,
    pub s3: u8,
    pub s4: u8,
    pub n_units: usize,
    pub c_initial: usize,
    pub c_later: usize,
    /// Number of adaptive (later-phase) observation rounds.
    pub later_rounds: usize,
    /// Truncate the fixed all-units schedule of M2 at this many samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m2_sample_cap: Option<usize>,
    pub replications: usize,
    pub master_seed: u64,
    pub true_params: ModelParams,
    pub profiles: Vec<CovariateProfile>,
    /// Failure threshold.
    pub xi: f64,
    pub horizons: Vec<f64>,
    pub n_paths_predict: usize,
    pub n_paths_truth: usize,
    pub dt: f64,
    pub omega1: f64,
    pub omega2: f64,
    /// Discrepancy-search iterations for unit selection.
    pub design_iterations: usize,
    #[serde(default)]
    pub fit_budget: FitBudget,
    /// Annual fixed times for the uniform baseline when the plan is windowed
    /// off (real case); empty means count-matched uniform random times.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub m1_fixed_times: Vec<f64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        for f in [self.s1, self.s2, self.s3, self.s4] {
            if f > 1 {
                return Err(Error::invalid("scenario flags must be 0 or 1"));
            }
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be >= 1"));
        }
        if self.n_units == 0 || self.c_initial == 0 || self.c_initial > self.n_units {
            return Err(Error::invalid("unit counts and budgets must satisfy 1 <= c <= L"));
        }
        if self.c_later == 0 || self.c_later > self.n_units {
            return Err(Error::invalid("later budget must satisfy 1 <= c <= L"));
        }
        if self.later_rounds == 0 || self.later_rounds > engineering_plan().later_windows.len() {
            return Err(Error::invalid(format!(
                "later_rounds must lie in 1..={}",
                engineering_plan().later_windows.len()
            )));
        }
        self.true_params.validate()?;
        if self.profiles.len() != self.n_units {
            return Err(Error::invalid("one profile per unit required"));
        }
        for (ix, p) in self.profiles.iter().enumerate() {
            p.validate()?;
            if p.unit_id != ix + 1 {
                return Err(Error::invalid("profiles must be ordered by unit id starting at 1"));
            }
        }
        if self.horizons.is_empty() {
            return Err(Error::invalid("at least one horizon required"));
        }
        for w in self.horizons.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("horizons must be strictly increasing"));
            }
        }
        if !(self.xi > 0.0) {
            return Err(Error::invalid("threshold xi must be positive"));
        }
        if (self.omega1 + self.omega2 - 1.0).abs() > 1e-9 || self.omega1 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::invalid("criterion weights must be nonnegative and sum to 1"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alpha_true(&self) -> f64 {
        self.true_params.alpha
    }
}

/// Orbit-like schedule with an annual high-stress season: every year the unit
/// runs hot between fractional phases 0.05 and 0.45 and cool with a light
/// load otherwise. The hot-season load cycles over the mission (light,
/// nominal, heavy) so each unit visits three distinct stress conditions.
pub fn default_profiles(n_units: usize) -> Vec<CovariateProfile> {
    let loads = [2.0, 5.0, 12.0];
    (1..=n_units)
        .map(|u| {
            let mut segments = vec![Segment { start: 0.0, s1: 20.0, s2: 1.0 }];
            for year in 0..13 {
                let s2 = loads[year % loads.len()];
                segments.push(Segment { start: year as f64 + 0.05, s1: 50.0, s2 });
                segments.push(Segment { start: year as f64 + 0.45, s1: 20.0, s2: 1.0 });
            }
            CovariateProfile { unit_id: u, segments }
        })
        .collect()
}

/// True-model mean degradation level at the given time, the deterministic
/// path used to place the failure threshold.
pub fn mean_level(params: &ModelParams, profile: &CovariateProfile, t: f64) -> f64 {
    params.mu_a * profile.lambda(t, params.gamma1, params.gamma2) * t.powf(params.alpha)
}

/// Synthetic five-unit study for a flag combination.
pub fn synthetic_scenario(flags: [u8; 4], replications: usize, master_seed: u64) -> ScenarioConfig {
    let alpha = if flags[0] == 1 { 1.2 } else { 0.5 };
    let true_params = ModelParams {
        alpha,
        mu_a: 1.0,
        tau_a2: 0.01,
        kappa: 1.0,
        gamma1: 0.1,
        gamma2: 0.2,
        rho: 0.5,
        sigma_override: None,
    };
    let profiles = default_profiles(5);
    let xi = mean_level(&true_params, &profiles[0], 11.2);
    ScenarioConfig {
        s1: flags[0],
        s2: flags[1],
        s3: flags[2],
        s4: flags[3],
        n_units: 5,
        c_initial: 3,
        c_later: 3,
        later_rounds: 14,
        m2_sample_cap: None,
        replications,
        master_seed,
        true_params,
        profiles,
        xi,
        horizons: (1..=16).map(|k| 10.0 + 0.125 * k as f64).collect(),
        n_paths_predict: 3000,
        n_paths_truth: 30_000,
        dt: 0.05,
        omega1: 0.5,
        omega2: 0.5,
        design_iterations: 20_000,
        fit_budget: FitBudget::default(),
        m1_fixed_times: Vec::new(),
    }
}

/// The twelve-unit power-switch study configuration.
pub fn real_case_scenario(replications: usize, master_seed: u64) -> ScenarioConfig {
    let true_params = ModelParams {
        alpha: 1.2,
        mu_a: 4.661,
        tau_a2: 0.405 * 0.405,
        kappa: 1.841,
        gamma1: 0.1,
        gamma2: 0.2,
        rho: 0.5,
        sigma_override: None,
    };
    let profiles = default_profiles(12);
    let xi = mean_level(&true_params, &profiles[0], 11.2);
    ScenarioConfig {
        s1: 1,
        s2: 1,
        s3: 0,
        s4: 0,
        n_units: 12,
        c_initial: 4,
        c_later: 6,
        later_rounds: 5,
        m2_sample_cap: Some(190),
        replications,
        master_seed,
        true_params,
        profiles,
        xi,
        horizons: (0..=8).map(|k| 10.0 + 0.25 * k as f64).collect(),
        n_paths_predict: 3000,
        n_paths_truth: 30_000,
        dt: 0.05,
        omega1: 0.5,
        omega2: 0.5,
        design_iterations: 20_000,
        fit_budget: FitBudget::default(),
        m1_fixed_times: vec![6.0, 7.0, 8.0, 9.0, 10.0],
    }
}

/// How observation times are chosen in the later phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeRule {
    /// Criterion-driven choice (adaptive method).
    Adaptive,
    /// Right endpoint of each plan window.
    RightEndpoint,
    /// Count-matched uniform random times, or the fixed annual times when the
    /// scenario supplies them.
    Uniform,
}

/// The realized observation plan for one method within a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodPlan {
    pub method: Method,
    /// Initial-phase unit selection; None observes every unit at every epoch.
    pub initial_selection: Option<ObservationMatrix>,
    /// Later-phase unit selection per round; None observes every unit.
    pub later_selection: Option<ObservationMatrix>,
    pub time_rule: TimeRule,
    pub pin_rho_zero: bool,
    pub pin_alpha: Option<f64>,
    pub sample_cap: Option<usize>,
}

/// Build the method plans for a scenario. Unit selections come from the
/// discrepancy search and are shared by the adaptive and uniform baselines so
/// their observation counts match by construction.
pub fn build_plans(config: &ScenarioConfig, methods: &[Method]) -> Result<Vec<MethodPlan>> {
    config.validate()?;
    let pin_alpha = if config.s4 == 1 { Some(config.true_params.alpha) } else { None };
    let initial_selection = if config.s2 == 1 && config.c_initial < config.n_units {
        let search = SearchConfig {
            algorithm: Algorithm::ThresholdAccepting,
            iterations: config.design_iterations,
            thresholds: None,
            seed: config.master_seed ^ 0x5_0a71a1,
        };
        Some(optimize_design(10, config.n_units, config.c_initial, &search)?.0)
    } else {
        None
    };
    let later_selection = if config.c_later < config.n_units {
        let search = SearchConfig {
            algorithm: Algorithm::ThresholdAccepting,
            iterations: config.design_iterations,
            thresholds: None,
            seed: config.master_seed ^ 0x7e_0a71a1,
        };
        Some(optimize_design(config.later_rounds, config.n_units, config.c_later, &search)?.0)
    } else {
        None
    };

    let mut plans = Vec::new();
    for &m in methods {
        let plan = match m {
            Method::M0 => MethodPlan {
                method: m,
                initial_selection: initial_selection.clone(),
                later_selection: later_selection.clone(),
                time_rule: TimeRule::Adaptive,
                pin_rho_zero: false,
                pin_alpha,
                sample_cap: None,
            },
            Method::M1 => MethodPlan {
                method: m,
                initial_selection: initial_selection.clone(),
                later_selection: later_selection.clone(),
                time_rule: if config.s3 == 1 { TimeRule::RightEndpoint } else { TimeRule::Uniform },
                pin_rho_zero: false,
                pin_alpha,
                sample_cap: None,
            },
            Method::M2 => MethodPlan {
                method: m,
                initial_selection: None,
                later_selection: None,
                time_rule: TimeRule::RightEndpoint,
                pin_rho_zero: true,
                pin_alpha,
                sample_cap: config.m2_sample_cap,
            },
        };
        plans.push(plan);
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_has_ten_initial_epochs_and_fourteen_windows() {
        let plan = engineering_plan();
        assert_eq!(plan.initial_epochs.len(), 10);
        assert_eq!(plan.initial_epochs[0], 0.5);
        assert_eq!(*plan.initial_epochs.last().unwrap(), 5.0);
        assert_eq!(plan.later_windows.len(), 14);
        assert_eq!(plan.later_windows[0], (5.0, 5.5));
        assert_eq!(plan.later_windows[5], (7.5, 8.0));
        assert_eq!(plan.later_windows[6], (8.0, 8.25));
        assert_eq!(plan.later_windows[13], (9.75, 10.0));
    }

    #[test]
    fn window_right_endpoints_match_schedule() {
        let plan = engineering_plan();
        let ends: Vec<f64> = plan.later_windows.iter().map(|w| w.1).collect();
        assert_eq!(&ends[..6], &[5.5, 6.0, 6.5, 7.0, 7.5, 8.0]);
        assert_eq!(&ends[6..], &[8.25, 8.5, 8.75, 9.0, 9.25, 9.5, 9.75, 10.0]);
    }

    #[test]
    fn all_schedule_times_sit_on_the_tick_lattice() {
        let plan = engineering_plan();
        for &t in &plan.initial_epochs {
            assert!((time_of(tick_of(t)) - t).abs() < 1e-12);
        }
        for &(lo, hi) in &plan.later_windows {
            assert!((time_of(tick_of(lo)) - lo).abs() < 1e-12);
            assert!((time_of(tick_of(hi)) - hi).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_scenario_flags_drive_alpha() {
        assert_eq!(synthetic_scenario([1, 0, 1, 0], 10, 1).alpha_true(), 1.2);
        assert_eq!(synthetic_scenario([0, 0, 1, 0], 10, 1).alpha_true(), 0.5);
    }

    #[test]
    fn scenario_validates() {
        synthetic_scenario([1, 0, 1, 0], 10, 1).validate().unwrap();
        real_case_scenario(10, 1).validate().unwrap();
    }

    #[test]
    fn m2_plan_observes_everyone_with_pinned_rho() {
        let cfg = synthetic_scenario([1, 0, 1, 0], 10, 1);
        let plans = build_plans(&cfg, &[Method::M2]).unwrap();
        assert!(plans[0].initial_selection.is_none());
        assert!(plans[0].later_selection.is_none());
        assert!(plans[0].pin_rho_zero);
    }

    #[test]
    fn budgeted_selection_respects_column_sums() {
        let cfg = synthetic_scenario([1, 1, 1, 0], 10, 3);
        let plans = build_plans(&cfg, &[Method::M0, Method::M1]).unwrap();
        let w0 = plans[0].initial_selection.as_ref().unwrap();
        assert_eq!(w0.column_sums(), vec![cfg.c_initial; 10]);
        let wl = plans[0].later_selection.as_ref().unwrap();
        assert_eq!(wl.column_sums(), vec![cfg.c_later; cfg.later_rounds]);
        // shared selections keep the baselines count-matched
        assert_eq!(plans[0].initial_selection, plans[1].initial_selection);
        assert_eq!(plans[0].later_selection, plans[1].later_selection);
    }

    #[test]
    fn real_case_counts() {
        let cfg = real_case_scenario(10, 1);
        // initial 10 epochs x 4 units + 5 rounds x 6 units = 70
        assert_eq!(10 * cfg.c_initial + cfg.later_rounds * cfg.c_later, 70);
        assert_eq!(cfg.m2_sample_cap, Some(190));
    }

    #[test]
    fn threshold_sits_on_the_mean_path() {
        let cfg = synthetic_scenario([1, 0, 1, 0], 10, 1);
        let expect = mean_level(&cfg.true_params, &cfg.profiles[0], 11.2);
        assert_eq!(cfg.xi, expect);
        assert!(cfg.xi > 0.0);
    }
}
