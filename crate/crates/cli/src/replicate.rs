//! Replication engine: shared latent degradation paths, per-method data
//! collection, estimation, prediction, and the scenario-level aggregation
//! into an error table.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use spatiodeg::data::{Observation, ObservationSet};
use spatiodeg::error::{Error, Result};
use spatiodeg::estimation::{FitConfig, PinnedParams, StructuralParams};
use spatiodeg::kernel::cholesky_factor;
use spatiodeg::model::{assemble_covariance, mean_vector};
use spatiodeg::params::ModelParams;
use spatiodeg::reliability::{reliability, system_reliability, ReliabilityConfig};
use spatiodeg::rng::derive_rng;
use spatiodeg::temporal::{next_time, CandidateSet, CriterionConfig};

use crate::scenario::{
    engineering_plan, tick_of, time_of, Method, MethodPlan, ScenarioConfig, TimeRule, DESIGN_LIFE,
    TICK,
};
use crate::table::{config_hash, ErrorTable, MethodErrors};

/// Number of lattice points in (0, design life].
pub fn n_ticks() -> usize {
    tick_of(DESIGN_LIFE)
}

/// Derive an independent 64-bit stream seed from the master seed, a purpose
/// label, and an index path.
pub fn mix_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    for &ix in indices {
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Joint law of all units' degradation levels on the full observation-time
/// lattice, factored once per scenario. Every method within a replication
/// reads its observed levels from the same realization, so method contrasts
/// are common-random-number paired.
pub struct LatentField {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    n_units: usize,
    n_ticks: usize,
}

/// One realization of the field; levels are addressed by (unit, tick).
pub struct LatentPaths {
    values: DVector<f64>,
    n_ticks: usize,
}

impl LatentPaths {
    pub fn level(&self, unit_id: usize, tick: usize) -> f64 {
        assert!(tick >= 1 && tick <= self.n_ticks);
        self.values[(unit_id - 1) * self.n_ticks + tick - 1]
    }
}

impl LatentField {
    pub fn new(params: &ModelParams, profiles: &[spatiodeg::CovariateProfile]) -> Result<Self> {
        let nt = n_ticks();
        let grid: Vec<f64> = (1..=nt).map(time_of).collect();
        let grids: Vec<Vec<f64>> = profiles.iter().map(|_| grid.clone()).collect();
        let cov = assemble_covariance(params, profiles, &grids)?;
        let chol = cholesky_factor(&cov)?;
        let mean = mean_vector(params, profiles, &grids);
        Ok(LatentField { mean, chol, n_units: profiles.len(), n_ticks: nt })
    }

    pub fn draw(&self, master_seed: u64, rep: u64) -> LatentPaths {
        let mut rng = derive_rng(master_seed, "latent-field", &[rep]);
        let m = self.mean.len();
        let mut z = DVector::<f64>::zeros(m);
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let values = &self.mean + &self.chol * z;
        LatentPaths { values, n_ticks: self.n_ticks }
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }
}

/// One method's result for one replication.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    /// Predicted per-unit reliability curves, unit-major.
    pub unit_curves: Vec<Vec<f64>>,
    /// Predicted joint series-system reliability curve.
    pub system_curve: Vec<f64>,
    pub n_obs: usize,
    pub theta_hat: ModelParams,
}

fn observe(data: &mut ObservationSet, paths: &LatentPaths, unit_id: usize, tick: usize) -> Result<()> {
    data.push(Observation { unit_id, time: time_of(tick), level: paths.level(unit_id, tick) })
}

fn structural(theta: &ModelParams) -> StructuralParams {
    StructuralParams {
        alpha: theta.alpha,
        kappa: theta.kappa,
        gamma1: theta.gamma1,
        gamma2: theta.gamma2,
        rho: theta.rho,
    }
}

fn pins(plan: &MethodPlan) -> PinnedParams {
    PinnedParams {
        alpha: plan.pin_alpha,
        rho: if plan.pin_rho_zero { Some(0.0) } else { None },
        ..PinnedParams::default()
    }
}

fn fit_theta(
    data: &ObservationSet,
    config: &ScenarioConfig,
    plan: &MethodPlan,
    n_starts: usize,
    max_evals: usize,
    warm: Option<StructuralParams>,
    seed: u64,
) -> Result<ModelParams> {
    let fit_config = FitConfig {
        n_starts,
        max_evals,
        fixed: pins(plan),
        init: warm,
        seed,
        ..FitConfig::default()
    };
    let result = spatiodeg::estimation::fit(data, &config.profiles, &fit_config)?;
    Ok(result.theta_hat)
}

/// The adaptive method needs a strictly positive drift variance to form the
/// predictive law of a candidate level; a collapsed estimate falls back to
/// this floor for the design step only.
const TAU_FLOOR: f64 = 1e-8;

fn adaptive_tick(
    theta_hat: &ModelParams,
    data: &ObservationSet,
    config: &ScenarioConfig,
    unit_id: usize,
    window: (f64, f64),
) -> usize {
    let fallback = tick_of(window.1);
    let times = data.times(unit_id);
    if times.len() < 2 {
        return fallback;
    }
    let mut theta = theta_hat.clone();
    if theta.tau_a2 < TAU_FLOOR {
        theta.tau_a2 = TAU_FLOOR;
        theta.sigma_override = None;
    }
    let candidates = CandidateSet::Windows { windows: vec![window], step: TICK };
    let criterion = CriterionConfig {
        omega1: config.omega1,
        omega2: config.omega2,
        candidates,
        quadrature_nodes: 32,
        mc_draws: 0,
        seed: 0,
    };
    let history = match spatiodeg::temporal::UnitHistory::new(
        unit_id,
        times,
        data.levels(unit_id),
        config.profiles[unit_id - 1].clone(),
    ) {
        Ok(h) => h,
        Err(_) => return fallback,
    };
    match next_time(&theta, &history, &criterion) {
        Ok((t, _)) => tick_of(t),
        Err(_) => fallback,
    }
}

/// Collect the full dataset one method observes in one replication.
pub fn collect_data(
    config: &ScenarioConfig,
    plan: &MethodPlan,
    paths: &LatentPaths,
    rep: u64,
) -> Result<ObservationSet> {
    let schedule = engineering_plan();
    let mut data = ObservationSet::new(config.n_units, std::iter::empty())?;

    // initial phase
    for (col, &epoch) in schedule.initial_epochs.iter().enumerate() {
        let units = match &plan.initial_selection {
            Some(w) => w.selected_units(col),
            None => (1..=config.n_units).collect(),
        };
        for u in units {
            observe(&mut data, paths, u, tick_of(epoch))?;
        }
    }

    // later phase
    let mut theta: Option<ModelParams> = None;
    let rounds: usize = match plan.method {
        Method::M2 => schedule.later_windows.len(),
        _ => config.later_rounds,
    };
    // observation rounds advance chronologically; without a prescribed plan
    // the campaign years (5, design life] are split evenly so one adaptive
    // pick lands in each stretch and unit histories stay time-ordered
    let free_span = (DESIGN_LIFE - schedule.initial_epochs.last().copied().unwrap_or(0.0))
        / rounds.max(1) as f64;
    for r in 0..rounds {
        let window = if config.s3 == 1 || plan.method == Method::M2 {
            schedule.later_windows[r]
        } else {
            let start = schedule.initial_epochs.last().copied().unwrap_or(0.0);
            (start + r as f64 * free_span, start + (r + 1) as f64 * free_span)
        };
        let units = match &plan.later_selection {
            Some(w) => w.selected_units(r),
            None => (1..=config.n_units).collect(),
        };
        if plan.time_rule == TimeRule::Adaptive {
            // refit once per round, warm-started from the previous estimate;
            // a failed refit keeps the previous round's estimate rather than
            // sinking the whole replication
            let (n_starts, max_evals, warm) = match &theta {
                None => (config.fit_budget.initial_starts, config.fit_budget.initial_evals, None),
                Some(prev) => (1, config.fit_budget.refit_evals, Some(structural(prev))),
            };
            let seed = mix_seed(config.master_seed, "round-fit", &[rep, r as u64]);
            if let Ok(t) = fit_theta(&data, config, plan, n_starts, max_evals, warm, seed) {
                theta = Some(t);
            }
        }
        for u in units {
            let tick = match plan.time_rule {
                TimeRule::Adaptive => match &theta {
                    Some(t) => adaptive_tick(t, &data, config, u, window),
                    None => tick_of(window.1),
                },
                TimeRule::RightEndpoint => tick_of(window.1),
                TimeRule::Uniform => {
                    if !config.m1_fixed_times.is_empty() {
                        tick_of(config.m1_fixed_times[r])
                    } else {
                        // count-matched uniform times over the later campaign:
                        // all rounds' ticks drawn up front per unit, distinct,
                        // and visited in time order
                        let mut rng =
                            derive_rng(config.master_seed, "uniform-times", &[rep, u as u64]);
                        let lo = tick_of(schedule.later_windows[0].0) + 1;
                        let hi = tick_of(DESIGN_LIFE);
                        let mut ticks: Vec<usize> = Vec::with_capacity(rounds);
                        while ticks.len() < rounds {
                            let t = rng.gen_range(lo..=hi);
                            if !ticks.contains(&t) {
                                ticks.push(t);
                            }
                        }
                        ticks.sort_unstable();
                        ticks[r]
                    }
                }
            };
            observe(&mut data, paths, u, tick)?;
        }
    }

    // sample cap: keep the earliest observations in (time, unit) order
    if let Some(cap) = plan.sample_cap {
        if data.len() > cap {
            let mut all: Vec<Observation> = data.iter().collect();
            all.sort_by(|a, b| {
                a.time.partial_cmp(&b.time).unwrap().then(a.unit_id.cmp(&b.unit_id))
            });
            all.truncate(cap);
            data = ObservationSet::new(config.n_units, all)?;
        }
    }
    Ok(data)
}

/// Run one method through one replication: collect data, fit, predict.
pub fn run_method(
    config: &ScenarioConfig,
    plan: &MethodPlan,
    paths: &LatentPaths,
    rep: u64,
) -> Result<RepOutcome> {
    let data = collect_data(config, plan, paths, rep)?;
    let seed = mix_seed(config.master_seed, "final-fit", &[rep, plan.method as u64]);
    let theta_hat = fit_theta(
        &data,
        config,
        plan,
        config.fit_budget.final_starts,
        config.fit_budget.final_evals,
        None,
        seed,
    )?;

    // prediction seeds are shared across methods so their Monte Carlo noise
    // cancels in contrasts
    let mut unit_curves = Vec::with_capacity(config.n_units);
    for u in 1..=config.n_units {
        let rel_config = ReliabilityConfig {
            xi: config.xi,
            horizons: config.horizons.clone(),
            n_paths: config.n_paths_predict,
            dt: config.dt,
            seed: mix_seed(config.master_seed, "predict-unit", &[rep, u as u64]),
        };
        unit_curves.push(reliability(&theta_hat, &config.profiles[u - 1], None, &rel_config)?);
    }
    let sys_config = ReliabilityConfig {
        xi: config.xi,
        horizons: config.horizons.clone(),
        n_paths: config.n_paths_predict,
        dt: config.dt,
        seed: mix_seed(config.master_seed, "predict-system", &[rep]),
    };
    let system_curve = system_reliability(&theta_hat, &config.profiles, None, &sys_config)?;
    Ok(RepOutcome { unit_curves, system_curve, n_obs: data.len(), theta_hat })
}

/// True-model reliability curves: per-unit and joint, at the truth-grade
/// path count.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrueCurves {
    pub unit_curves: Vec<Vec<f64>>,
    pub system_curve: Vec<f64>,
}

pub fn true_curves(config: &ScenarioConfig) -> Result<TrueCurves> {
    let mut unit_curves = Vec::with_capacity(config.n_units);
    for u in 1..=config.n_units {
        let rel_config = ReliabilityConfig {
            xi: config.xi,
            horizons: config.horizons.clone(),
            n_paths: config.n_paths_truth,
            dt: config.dt,
            seed: mix_seed(config.master_seed, "truth-unit", &[u as u64]),
        };
        unit_curves.push(reliability(
            &config.true_params,
            &config.profiles[u - 1],
            None,
            &rel_config,
        )?);
    }
    let sys_config = ReliabilityConfig {
        xi: config.xi,
        horizons: config.horizons.clone(),
        n_paths: config.n_paths_truth,
        dt: config.dt,
        seed: mix_seed(config.master_seed, "truth-system", &[]),
    };
    let system_curve =
        system_reliability(&config.true_params, &config.profiles, None, &sys_config)?;
    Ok(TrueCurves { unit_curves, system_curve })
}

fn cached_true_curves(config: &ScenarioConfig, cache_dir: Option<&Path>) -> Result<TrueCurves> {
    let Some(dir) = cache_dir else { return true_curves(config) };
    let path = dir.join(format!("truth-{}.json", config_hash(config)));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(curves) = serde_json::from_str::<TrueCurves>(&text) {
            return Ok(curves);
        }
    }
    let curves = true_curves(config)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, serde_json::to_string(&curves)?)?;
    Ok(curves)
}

/// Fraction of replications a method may fail before the scenario aborts.
const MAX_FAILURE_RATE: f64 = 0.05;

/// Relative-error summaries skip horizons where the true reliability has
/// already collapsed below this level.
const MIN_TRUE_RELIABILITY: f64 = 0.01;

/// Run every replication of a scenario for the given methods and aggregate
/// the prediction errors. Replications execute in parallel; results are
/// combined in replication order, so the outcome does not depend on the
/// worker count.
pub fn run_scenario(
    config: &ScenarioConfig,
    methods: &[Method],
    cache_dir: Option<&Path>,
) -> Result<ErrorTable> {
    config.validate()?;
    let plans = crate::scenario::build_plans(config, methods)?;
    let truth = cached_true_curves(config, cache_dir)?;
    let field = LatentField::new(&config.true_params, &config.profiles)?;

    let reps: Vec<Vec<std::result::Result<RepOutcome, String>>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let paths = field.draw(config.master_seed, rep);
            plans
                .iter()
                .map(|plan| run_method(config, plan, &paths, rep).map_err(|e| e.to_string()))
                .collect()
        })
        .collect();

    // fair-comparison invariant: the uniform baseline must use as many
    // observations as the adaptive method, within one per replication
    let m0_ix = plans.iter().position(|p| p.method == Method::M0);
    let m1_ix = plans.iter().position(|p| p.method == Method::M1);
    if let (Some(i0), Some(i1)) = (m0_ix, m1_ix) {
        for (rep, r) in reps.iter().enumerate() {
            if let (Ok(a), Ok(b)) = (&r[i0], &r[i1]) {
                if a.n_obs.abs_diff(b.n_obs) > 1 {
                    return Err(Error::invalid(format!(
                        "observation counts diverged in replication {rep}: m0 used {}, m1 used {}",
                        a.n_obs, b.n_obs
                    )));
                }
            }
        }
    }

    let n_h = config.horizons.len();
    let excluded: Vec<bool> = (0..n_h)
        .map(|k| truth.unit_curves.iter().any(|c| c[k] < MIN_TRUE_RELIABILITY))
        .collect();

    let mut method_errors = Vec::with_capacity(plans.len());
    for (p_ix, plan) in plans.iter().enumerate() {
        let outcomes: Vec<&RepOutcome> =
            reps.iter().filter_map(|r| r[p_ix].as_ref().ok()).collect();
        let failed = config.replications - outcomes.len();
        if (failed as f64) > MAX_FAILURE_RATE * config.replications as f64 {
            let first = reps
                .iter()
                .find_map(|r| r[p_ix].as_ref().err())
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid(format!(
                "method {} failed {failed}/{} replications (first error: {first})",
                plan.method.label(),
                config.replications
            )));
        }
        let n_ok = outcomes.len() as f64;
        let mut mean_rel_err_pct = vec![None; n_h];
        let mut system_curve = vec![0.0; n_h];
        let mut mean_unit_curve = vec![0.0; n_h];
        for k in 0..n_h {
            let mut err_sum = 0.0;
            for o in &outcomes {
                system_curve[k] += o.system_curve[k] / n_ok;
                let mut unit_err = 0.0;
                let mut unit_mean = 0.0;
                for u in 0..config.n_units {
                    unit_mean += o.unit_curves[u][k];
                    if !excluded[k] {
                        unit_err += (o.unit_curves[u][k] - truth.unit_curves[u][k]).abs()
                            / truth.unit_curves[u][k];
                    }
                }
                mean_unit_curve[k] += unit_mean / (config.n_units as f64 * n_ok);
                err_sum += unit_err / config.n_units as f64;
            }
            if !excluded[k] {
                mean_rel_err_pct[k] = Some(100.0 * err_sum / n_ok);
            }
        }
        let mean_observations =
            outcomes.iter().map(|o| o.n_obs as f64).sum::<f64>() / n_ok;
        method_errors.push(MethodErrors {
            method: plan.method,
            mean_rel_err_pct,
            system_curve,
            mean_unit_curve,
            failed_reps: failed,
            mean_observations,
        });
    }

    let true_mean_unit_curve: Vec<f64> = (0..n_h)
        .map(|k| {
            truth.unit_curves.iter().map(|c| c[k]).sum::<f64>() / config.n_units as f64
        })
        .collect();
    Ok(ErrorTable {
        horizons: config.horizons.clone(),
        replications: config.replications,
        master_seed: config.master_seed,
        config_hash: config_hash(config),
        excluded_horizons: config
            .horizons
            .iter()
            .zip(&excluded)
            .filter(|(_, &e)| e)
            .map(|(&h, _)| h)
            .collect(),
        true_system_curve: truth.system_curve,
        true_mean_unit_curve,
        methods: method_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_plans, synthetic_scenario};

    fn small_config() -> ScenarioConfig {
        let mut cfg = synthetic_scenario([1, 1, 1, 0], 2, 42);
        cfg.n_paths_predict = 400;
        cfg.n_paths_truth = 800;
        cfg.design_iterations = 2000;
        cfg.later_rounds = 4;
        cfg
    }

    #[test]
    fn latent_field_draws_are_deterministic_and_distinct() {
        let cfg = small_config();
        let field = LatentField::new(&cfg.true_params, &cfg.profiles).unwrap();
        let a = field.draw(cfg.master_seed, 0);
        let b = field.draw(cfg.master_seed, 0);
        let c = field.draw(cfg.master_seed, 1);
        assert_eq!(a.level(1, 100).to_bits(), b.level(1, 100).to_bits());
        assert_ne!(a.level(1, 100).to_bits(), c.level(1, 100).to_bits());
    }

    #[test]
    fn latent_field_marginal_moments_match_model() {
        // unit 1 at t = 5: mean mu_a eta, variance tau^2 eta^2 + sigma^2 t^alpha
        let cfg = small_config();
        let p = &cfg.true_params;
        let field = LatentField::new(p, &cfg.profiles).unwrap();
        let eta = cfg.profiles[0].lambda(5.0, p.gamma1, p.gamma2) * 5.0_f64.powf(p.alpha);
        let expect_mean = p.mu_a * eta;
        let expect_var = p.tau_a2 * eta * eta + p.sigma2() * 5.0_f64.powf(p.alpha);
        let n = 4000;
        let draws: Vec<f64> =
            (0..n).map(|r| field.draw(7, r).level(1, tick_of(5.0))).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (expect_var / n as f64).sqrt();
        assert!((mean - expect_mean).abs() < 4.0 * se, "{mean} vs {expect_mean}");
        assert!((var / expect_var - 1.0).abs() < 0.15, "{var} vs {expect_var}");
    }

    #[test]
    fn collected_counts_match_the_plans() {
        let cfg = small_config();
        let field = LatentField::new(&cfg.true_params, &cfg.profiles).unwrap();
        let paths = field.draw(cfg.master_seed, 0);
        let plans = build_plans(&cfg, &[Method::M1, Method::M2]).unwrap();
        // M1: 10 epochs x 3 units + 4 rounds x 3 units
        let m1 = collect_data(&cfg, &plans[0], &paths, 0).unwrap();
        assert_eq!(m1.len(), 10 * 3 + 4 * 3);
        // M2: every unit at all 24 epochs
        let m2 = collect_data(&cfg, &plans[1], &paths, 0).unwrap();
        assert_eq!(m2.len(), 24 * 5);
    }

    #[test]
    fn sample_cap_keeps_earliest_observations() {
        let cfg = small_config();
        let field = LatentField::new(&cfg.true_params, &cfg.profiles).unwrap();
        let paths = field.draw(cfg.master_seed, 0);
        let mut plans = build_plans(&cfg, &[Method::M2]).unwrap();
        plans[0].sample_cap = Some(60);
        let data = collect_data(&cfg, &plans[0], &paths, 0).unwrap();
        assert_eq!(data.len(), 60);
        // 60 = 12 full epochs x 5 units, so nothing past epoch 12 (t = 6.0)
        let t_max = data.iter().map(|o| o.time).fold(0.0, f64::max);
        assert!(t_max <= 6.0 + 1e-12, "latest kept time {t_max}");
    }

    #[test]
    fn adaptive_times_fall_inside_their_windows() {
        let cfg = small_config();
        let field = LatentField::new(&cfg.true_params, &cfg.profiles).unwrap();
        let paths = field.draw(cfg.master_seed, 0);
        let plans = build_plans(&cfg, &[Method::M0]).unwrap();
        let data = collect_data(&cfg, &plans[0], &paths, 0).unwrap();
        let windows = engineering_plan().later_windows;
        for o in data.iter() {
            if o.time > 5.0 + 1e-12 {
                let inside = windows[..cfg.later_rounds]
                    .iter()
                    .any(|&(lo, hi)| o.time > lo && o.time <= hi + 1e-12);
                assert!(inside, "time {} outside every round window", o.time);
            }
        }
        assert_eq!(data.len(), 10 * 3 + cfg.later_rounds * 3);
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(1, "a", &[0]), mix_seed(1, "a", &[1]));
        assert_ne!(mix_seed(1, "a", &[0]), mix_seed(1, "b", &[0]));
        assert_ne!(mix_seed(1, "a", &[0]), mix_seed(2, "a", &[0]));
        assert_eq!(mix_seed(1, "a", &[0]), mix_seed(1, "a", &[0]));
    }

    #[test]
    fn scenario_run_is_deterministic() {
        let mut cfg = small_config();
        cfg.replications = 2;
        cfg.fit_budget.initial_starts = 2;
        cfg.fit_budget.initial_evals = 150;
        cfg.fit_budget.refit_evals = 80;
        cfg.fit_budget.final_starts = 2;
        cfg.fit_budget.final_evals = 200;
        let a = run_scenario(&cfg, &[Method::M0, Method::M1], None).unwrap();
        let b = run_scenario(&cfg, &[Method::M0, Method::M1], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.methods.len(), 2);
        assert!(a.methods[0].mean_observations > 0.0);
    }
}
