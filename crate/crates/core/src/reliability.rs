//! First-passage Monte Carlo reliability prediction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::profile::CovariateProfile;
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityConfig {
    /// Failure threshold.
    pub xi: f64,
    /// Strictly increasing prediction horizons (years).
    pub horizons: Vec<f64>,
    pub n_paths: usize,
    /// Simulation step (years).
    pub dt: f64,
    pub seed: u64,
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::invalid(format!("threshold xi must be a positive finite value, got {}", self.xi)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be > 0"));
        }
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths must be >= 1"));
        }
        if self.horizons.is_empty() {
            return Err(Error::invalid("at least one horizon required"));
        }
        for w in self.horizons.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("horizons must be strictly increasing"));
            }
            if self.dt > w[1] - w[0] + 1e-12 {
                return Err(Error::invalid(format!(
                    "dt = {} exceeds smallest inter-horizon gap {}",
                    self.dt,
                    w[1] - w[0]
                )));
            }
        }
        Ok(())
    }
}

/// Posterior law of the drift coefficient `a` given one observed level.
/// With no observation this is the prior `N(mu_a, tau_a2)`.
fn drift_posterior(params: &ModelParams, profile: &CovariateProfile, last: Option<(f64, f64)>) -> (f64, f64) {
    let prior = (params.mu_a, params.tau_a2);
    let Some((t0, x0)) = last else { return prior };
    if t0 <= 0.0 {
        return prior;
    }
    let load = profile.lambda(t0, params.gamma1, params.gamma2) * t0.powf(params.alpha);
    let var_x = params.tau_a2 * load * load + params.sigma2() * t0.powf(params.alpha);
    if var_x <= 0.0 {
        return prior;
    }
    let cov_ax = params.tau_a2 * load;
    let mean = params.mu_a + cov_ax * (x0 - params.mu_a * load) / var_x;
    let var = (params.tau_a2 - cov_ax * cov_ax / var_x).max(0.0);
    (mean, var)
}

/// Per-horizon survival probability `R(t)`: the fraction of simulated paths
/// whose running maximum stays below `xi` up to each horizon. Paths start
/// from `last_state` (conditioning the random drift on the observed level)
/// or from the origin, and step on the transformed-time increments with step
/// `dt`; crossings are detected by level comparison at grid points only.
/// All horizons are evaluated on shared paths, so the result is nonincreasing
/// across horizons by construction.
pub fn reliability(
    params: &ModelParams,
    profile: &CovariateProfile,
    last_state: Option<(f64, f64)>,
    config: &ReliabilityConfig,
) -> Result<Vec<f64>> {
    params.validate()?;
    profile.validate()?;
    config.validate()?;
    let (t0, x0) = last_state.unwrap_or((0.0, 0.0));
    if config.horizons[0] < t0 {
        return Err(Error::invalid("horizons must not precede the starting time"));
    }

    // time grid: t0, t0+dt, ... with every horizon inserted exactly
    let mut grid = Vec::new();
    let t_end = *config.horizons.last().unwrap();
    let mut t = t0;
    while t < t_end - 1e-12 {
        grid.push(t);
        t += config.dt;
    }
    grid.push(t_end);
    for &h in &config.horizons {
        grid.push(h);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    // index of the grid point for each horizon
    let horizon_ix: Vec<usize> = config
        .horizons
        .iter()
        .map(|&h| grid.iter().position(|&g| (g - h).abs() < 1e-12).expect("horizon on grid"))
        .collect();

    let loads: Vec<f64> =
        grid.iter().map(|&t| profile.lambda(t, params.gamma1, params.gamma2) * t.powf(params.alpha)).collect();
    let lam: Vec<f64> = grid.iter().map(|&t| t.powf(params.alpha)).collect();
    let sigma = params.sigma();
    let (a_mean, a_var) = drift_posterior(params, profile, last_state);
    let a_sd = a_var.sqrt();

    let mut rng = derive_rng(config.seed, "reliability", &[]);
    let mut survivors = vec![0usize; config.horizons.len()];
    for _ in 0..config.n_paths {
        let a = a_mean + a_sd * rng.sample::<f64, _>(StandardNormal);
        let mut x = x0;
        let mut crossed_at = usize::MAX;
        if x >= config.xi {
            crossed_at = 0;
        } else {
            for k in 1..grid.len() {
                let d_load = loads[k] - loads[k - 1];
                let d_lam = (lam[k] - lam[k - 1]).max(0.0);
                let z: f64 = rng.sample(StandardNormal);
                x += a * d_load + sigma * d_lam.sqrt() * z;
                if x >= config.xi {
                    crossed_at = k;
                    break;
                }
            }
        }
        for (h, &hix) in horizon_ix.iter().enumerate() {
            if crossed_at > hix {
                survivors[h] += 1;
            }
        }
    }
    Ok(survivors.iter().map(|&s| s as f64 / config.n_paths as f64).collect())
}

/// Joint survival probability of the whole series system: the fraction of
/// simulated joint paths on which every unit stays below `xi` up to each
/// horizon. Drift coefficients are drawn jointly with their adjacent-unit
/// correlation (conditioned on the supplied last levels when given), so
/// positively correlated units survive together more often than the product
/// of their marginals suggests.
pub fn system_reliability(
    params: &ModelParams,
    profiles: &[crate::profile::CovariateProfile],
    last_states: Option<&[(f64, f64)]>,
    config: &ReliabilityConfig,
) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};

    params.validate()?;
    config.validate()?;
    let n_units = profiles.len();
    if n_units == 0 {
        return Err(Error::invalid("at least one profile required"));
    }
    for p in profiles {
        p.validate()?;
    }
    if let Some(states) = last_states {
        if states.len() != n_units {
            return Err(Error::invalid("one last state per unit required"));
        }
    }

    // drift prior: mean mu_a, adjacency covariance
    let prior_cov = DMatrix::from_fn(n_units, n_units, |i, j| {
        crate::model::drift_covariance(params.tau_a2, params.rho, i + 1, j + 1)
    });
    let prior_mean = DVector::from_element(n_units, params.mu_a);

    // condition the drift vector on the observed last levels (units with
    // t0 <= 0 contribute no information)
    let starts: Vec<(f64, f64)> = match last_states {
        Some(s) => s.to_vec(),
        None => vec![(0.0, 0.0); n_units],
    };
    let observed: Vec<usize> = starts
        .iter()
        .enumerate()
        .filter(|(_, &(t0, _))| t0 > 0.0)
        .map(|(i, _)| i)
        .collect();
    let (a_mean, a_cov) = if observed.is_empty() {
        (prior_mean.clone(), prior_cov.clone())
    } else {
        let k = observed.len();
        let loads: Vec<f64> = observed
            .iter()
            .map(|&i| {
                let t0 = starts[i].0;
                profiles[i].lambda(t0, params.gamma1, params.gamma2) * t0.powf(params.alpha)
            })
            .collect();
        // Cov(X_i(t0_i), X_j(t0_j)) = eta_i eta_j Cov(a_i, a_j) + delta_ij sigma^2 Lambda(t0_i)
        let s2 = params.sigma2();
        let cov_xx = DMatrix::from_fn(k, k, |p, q| {
            let (i, j) = (observed[p], observed[q]);
            let mut v = loads[p] * loads[q] * prior_cov[(i, j)];
            if i == j {
                v += s2 * starts[i].0.powf(params.alpha);
            }
            v
        });
        let cov_ax = DMatrix::from_fn(n_units, k, |i, q| prior_cov[(i, observed[q])] * loads[q]);
        let resid = DVector::from_fn(k, |q, _| starts[observed[q]].1 - params.mu_a * loads[q]);
        let l = crate::kernel::cholesky_factor(&cov_xx)
            .map_err(|_| Error::Singular("drift-conditioning block singular".into()))?;
        let mut cond_mean = prior_mean.clone();
        cond_mean += &cov_ax * crate::kernel::cholesky_solve(&l, &resid);
        // cond_cov = prior - cov_ax cov_xx^{-1} cov_ax^T via triangular solves
        let mut cond_cov = prior_cov.clone();
        let mut li = DMatrix::<f64>::zeros(k, n_units);
        for i in 0..n_units {
            let mut col = cov_ax.row(i).transpose();
            crate::kernel::forward_solve(&l, &mut col);
            li.set_column(i, &col);
        }
        for i in 0..n_units {
            for j in 0..n_units {
                cond_cov[(i, j)] -= li.column(i).dot(&li.column(j));
            }
        }
        (cond_mean, cond_cov)
    };

    // square root of the (possibly semidefinite) conditional drift covariance
    let a_root = match crate::kernel::cholesky_factor(&a_cov) {
        Ok(l) => l,
        Err(_) => {
            let eig = a_cov.clone().symmetric_eigen();
            let mut root = eig.eigenvectors.clone();
            for (c, ev) in eig.eigenvalues.iter().enumerate() {
                let s = ev.max(0.0).sqrt();
                for r in 0..n_units {
                    root[(r, c)] *= s;
                }
            }
            root
        }
    };

    // shared time grid from the earliest start, horizons inserted exactly
    let t_begin = starts.iter().map(|s| s.0).fold(f64::INFINITY, f64::min).max(0.0);
    let t_end = *config.horizons.last().unwrap();
    if config.horizons[0] < t_begin {
        return Err(Error::invalid("horizons must not precede the earliest starting time"));
    }
    let mut grid = Vec::new();
    let mut t = t_begin;
    while t < t_end - 1e-12 {
        grid.push(t);
        t += config.dt;
    }
    grid.push(t_end);
    for &h in &config.horizons {
        grid.push(h);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let horizon_ix: Vec<usize> = config
        .horizons
        .iter()
        .map(|&h| grid.iter().position(|&g| (g - h).abs() < 1e-12).expect("horizon on grid"))
        .collect();

    let loads: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| {
            grid.iter()
                .map(|&t| p.lambda(t, params.gamma1, params.gamma2) * t.powf(params.alpha))
                .collect()
        })
        .collect();
    let lam: Vec<f64> = grid.iter().map(|&t| t.powf(params.alpha)).collect();
    let sigma = params.sigma();

    let mut rng = derive_rng(config.seed, "system-reliability", &[]);
    let mut survivors = vec![0usize; config.horizons.len()];
    let mut z = DVector::<f64>::zeros(n_units);
    for _ in 0..config.n_paths {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let a = &a_mean + &a_root * &z;
        let mut x: Vec<f64> = starts.iter().map(|&(_, x0)| x0).collect();
        let mut crossed_at = usize::MAX;
        if x.iter().any(|&v| v >= config.xi) {
            crossed_at = 0;
        } else {
            'path: for k in 1..grid.len() {
                for u in 0..n_units {
                    if grid[k] <= starts[u].0 + 1e-12 {
                        continue;
                    }
                    let prev = grid[k - 1].max(starts[u].0);
                    let prev_ix = grid.iter().position(|&g| (g - prev).abs() < 1e-12);
                    let (load_prev, lam_prev) = match prev_ix {
                        Some(ix) => (loads[u][ix], lam[ix]),
                        None => {
                            let t0 = starts[u].0;
                            (
                                profiles[u].lambda(t0, params.gamma1, params.gamma2) * t0.powf(params.alpha),
                                t0.powf(params.alpha),
                            )
                        }
                    };
                    let d_load = loads[u][k] - load_prev;
                    let d_lam = (lam[k] - lam_prev).max(0.0);
                    let e: f64 = rng.sample(StandardNormal);
                    x[u] += a[u] * d_load + sigma * d_lam.sqrt() * e;
                    if x[u] >= config.xi {
                        crossed_at = k;
                        break 'path;
                    }
                }
            }
        }
        for (h, &hix) in horizon_ix.iter().enumerate() {
            if crossed_at > hix {
                survivors[h] += 1;
            }
        }
    }
    Ok(survivors.iter().map(|&s| s as f64 / config.n_paths as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams {
            alpha: 1.2,
            mu_a: 1.0,
            tau_a2: 0.01,
            kappa: 1.0,
            gamma1: 0.1,
            gamma2: 0.2,
            rho: 0.5,
            sigma_override: None,
        }
    }

    fn config(xi: f64) -> ReliabilityConfig {
        ReliabilityConfig { xi, horizons: vec![10.0, 11.0, 12.0], n_paths: 2000, dt: 0.05, seed: 9 }
    }

    #[test]
    fn unreachable_threshold_gives_one() {
        let p = params();
        let prof = CovariateProfile::constant(1, 30.0, 1.2);
        let r = reliability(&p, &prof, None, &config(1e6)).unwrap();
        assert!(r.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_elapsed_time_survives_below_threshold() {
        let p = params();
        let prof = CovariateProfile::constant(1, 30.0, 1.2);
        let cfg = ReliabilityConfig { horizons: vec![5.0, 6.0], ..config(100.0) };
        let r = reliability(&p, &prof, Some((5.0, 3.0)), &cfg).unwrap();
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn monotone_in_horizon_and_threshold() {
        let p = params();
        let prof = CovariateProfile::constant(1, 30.0, 1.2);
        let (mean11, _) = crate::model::marginal_moments(&p, &prof, 11.0).unwrap();
        let r = reliability(&p, &prof, None, &config(mean11)).unwrap();
        assert!(r[0] >= r[1] && r[1] >= r[2]);
        let r_higher = reliability(&p, &prof, None, &config(mean11 * 1.2)).unwrap();
        for (lo, hi) in r.iter().zip(&r_higher) {
            assert!(hi >= lo);
        }
    }

    #[test]
    fn rejects_oversized_dt() {
        let p = params();
        let prof = CovariateProfile::constant(1, 30.0, 1.2);
        let cfg = ReliabilityConfig { dt: 2.0, ..config(10.0) };
        assert!(reliability(&p, &prof, None, &cfg).is_err());
    }

    #[test]
    fn system_reliability_unreachable_threshold_gives_one() {
        let p = params();
        let profs: Vec<_> = (1..=3).map(|u| CovariateProfile::constant(u, 30.0, 1.2)).collect();
        let r = system_reliability(&p, &profs, None, &config(1e6)).unwrap();
        assert!(r.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn independent_system_matches_marginal_product() {
        let p = ModelParams { rho: 0.0, tau_a2: 0.04, ..params() };
        let profs: Vec<_> = (1..=2).map(|u| CovariateProfile::constant(u, 30.0, 1.2)).collect();
        let (mean11, _) = crate::model::marginal_moments(&p, &profs[0], 11.0).unwrap();
        let cfg = ReliabilityConfig { xi: mean11, horizons: vec![10.5], n_paths: 40_000, dt: 0.05, seed: 3 };
        let joint = system_reliability(&p, &profs, None, &cfg).unwrap()[0];
        let single = reliability(&p, &profs[0], None, &cfg).unwrap()[0];
        let expect = single * single;
        let se = (expect * (1.0 - expect) / cfg.n_paths as f64).sqrt();
        assert!((joint - expect).abs() < 4.0 * se + 0.01, "joint {joint} vs product {expect}");
    }

    #[test]
    fn positive_correlation_lifts_system_survival() {
        let p = ModelParams { rho: 0.5, tau_a2: 0.09, ..params() };
        let profs: Vec<_> = (1..=5).map(|u| CovariateProfile::constant(u, 30.0, 1.2)).collect();
        let (mean11, _) = crate::model::marginal_moments(&p, &profs[0], 11.0).unwrap();
        let cfg = ReliabilityConfig { xi: mean11, horizons: vec![11.0], n_paths: 30_000, dt: 0.05, seed: 8 };
        let joint = system_reliability(&p, &profs, None, &cfg).unwrap()[0];
        let single = reliability(&p, &profs[0], None, &cfg).unwrap()[0];
        let product = single.powi(5);
        assert!(joint > product, "joint {joint} should exceed independence product {product}");
    }

    #[test]
    fn deterministic_given_seed() {
        let p = params();
        let prof = CovariateProfile::constant(1, 30.0, 1.2);
        let r1 = reliability(&p, &prof, None, &config(20.0)).unwrap();
        let r2 = reliability(&p, &prof, None, &config(20.0)).unwrap();
        assert_eq!(r1, r2);
    }
}
