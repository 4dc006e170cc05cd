//! The degradation model itself: analytic moments, the full spatiotemporal
//! covariance, exact path simulation, and Gaussian conditional sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::kernel::{cholesky_factor, cholesky_solve};
use crate::params::ModelParams;
use crate::profile::CovariateProfile;
use crate::rng::derive_rng;

/// Covariance of the random drift coefficients of units `i` and `j`
/// (1-based lattice positions): `tau_a2` on the diagonal, `tau_a2 * rho` for
/// lattice-adjacent units, zero otherwise.
pub fn drift_covariance(tau_a2: f64, rho: f64, i: usize, j: usize) -> f64 {
    if i == j {
        tau_a2
    } else if i.abs_diff(j) == 1 {
        tau_a2 * rho
    } else {
        0.0
    }
}

/// Mean and variance of `X_i(t)`:
/// mean `mu_a lambda(t) Lambda(t)`, variance
/// `tau_a2 [lambda(t) Lambda(t)]^2 + sigma^2 Lambda(t)`.
pub fn marginal_moments(params: &ModelParams, profile: &CovariateProfile, t: f64) -> Result<(f64, f64)> {
    params.validate()?;
    if t < 0.0 || !t.is_finite() {
        return Err(Error::invalid(format!("time must be >= 0, got {t}")));
    }
    let lam = profile.lambda(t, params.gamma1, params.gamma2);
    let big_lam = t.powf(params.alpha);
    let load = lam * big_lam;
    let mean = params.mu_a * load;
    let var = params.tau_a2 * load * load + params.sigma2() * big_lam;
    Ok((mean, var))
}

fn check_grids(profiles: &[CovariateProfile], times: &[Vec<f64>]) -> Result<()> {
    if profiles.len() != times.len() {
        return Err(Error::invalid("one time grid per profile required"));
    }
    for p in profiles {
        p.validate()?;
    }
    for grid in times {
        for w in grid.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("per-unit times must be strictly increasing"));
            }
        }
        if let Some(&t0) = grid.first() {
            if !(t0 > 0.0) {
                return Err(Error::invalid("observation times must be strictly positive"));
            }
        }
    }
    Ok(())
}

/// Loading vector entries `lambda_i(t_ij) Lambda(t_ij)` stacked over units.
pub fn loading_vector(
    alpha: f64,
    gamma1: f64,
    gamma2: f64,
    profiles: &[CovariateProfile],
    times: &[Vec<f64>],
) -> DVector<f64> {
    let mut xi = Vec::new();
    for (p, grid) in profiles.iter().zip(times) {
        for &t in grid {
            xi.push(p.lambda(t, gamma1, gamma2) * t.powf(alpha));
        }
    }
    DVector::from_vec(xi)
}

/// The scaled covariance `Psi_tilde` (i.e. `Psi / tau_a2`): diagonal blocks
/// `Xi_i Xi_i^T + kappa^2 Q_i`, adjacent off-diagonal blocks
/// `rho Xi_i Xi_j^T`, zero otherwise. Built upper triangle first and mirrored,
/// so the output is bitwise symmetric.
pub fn scaled_covariance(
    alpha: f64,
    kappa: f64,
    gamma1: f64,
    gamma2: f64,
    rho: f64,
    profiles: &[CovariateProfile],
    times: &[Vec<f64>],
) -> Result<DMatrix<f64>> {
    check_grids(profiles, times)?;
    let sizes: Vec<usize> = times.iter().map(Vec::len).collect();
    let m: usize = sizes.iter().sum();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0usize, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let k2 = kappa * kappa;
    let per_unit_xi: Vec<Vec<f64>> = profiles
        .iter()
        .zip(times)
        .map(|(p, grid)| grid.iter().map(|&t| p.lambda(t, gamma1, gamma2) * t.powf(alpha)).collect())
        .collect();
    let per_unit_lam: Vec<Vec<f64>> =
        times.iter().map(|grid| grid.iter().map(|&t| t.powf(alpha)).collect()).collect();

    let mut psi = DMatrix::<f64>::zeros(m, m);
    for i in 0..profiles.len() {
        let ui = profiles[i].unit_id;
        // diagonal block
        for l in 0..sizes[i] {
            for k in l..sizes[i] {
                let v = per_unit_xi[i][l] * per_unit_xi[i][k] + k2 * per_unit_lam[i][l.min(k)];
                psi[(offsets[i] + l, offsets[i] + k)] = v;
            }
        }
        // adjacent off-diagonal blocks (upper part only)
        for j in (i + 1)..profiles.len() {
            let uj = profiles[j].unit_id;
            if ui.abs_diff(uj) != 1 {
                continue;
            }
            for l in 0..sizes[i] {
                for k in 0..sizes[j] {
                    psi[(offsets[i] + l, offsets[j] + k)] = rho * per_unit_xi[i][l] * per_unit_xi[j][k];
                }
            }
        }
    }
    // mirror the upper triangle
    for r in 0..m {
        for c in (r + 1)..m {
            psi[(c, r)] = psi[(r, c)];
        }
    }
    Ok(psi)
}

/// Full covariance `Psi` of the stacked observation vector. For `tau_a2 > 0`
/// this is `tau_a2 * Psi_tilde`; the degenerate fixed-effects case
/// (`tau_a2 = 0`) keeps only the diffusion blocks `sigma^2 Q_i`.
pub fn assemble_covariance(
    params: &ModelParams,
    profiles: &[CovariateProfile],
    times: &[Vec<f64>],
) -> Result<DMatrix<f64>> {
    params.validate()?;
    if params.tau_a2 > 0.0 {
        let mut psi = scaled_covariance(
            params.alpha,
            params.kappa,
            params.gamma1,
            params.gamma2,
            params.rho,
            profiles,
            times,
        )?;
        psi *= params.tau_a2;
        Ok(psi)
    } else {
        check_grids(profiles, times)?;
        let sizes: Vec<usize> = times.iter().map(Vec::len).collect();
        let m: usize = sizes.iter().sum();
        let s2 = params.sigma2();
        let mut psi = DMatrix::<f64>::zeros(m, m);
        let mut off = 0usize;
        for grid in times {
            let lam: Vec<f64> = grid.iter().map(|&t| t.powf(params.alpha)).collect();
            for l in 0..grid.len() {
                for k in 0..grid.len() {
                    psi[(off + l, off + k)] = s2 * lam[l.min(k)];
                }
            }
            off += grid.len();
        }
        Ok(psi)
    }
}

/// Mean vector `mu_a * Xi` of the stacked observation vector.
pub fn mean_vector(params: &ModelParams, profiles: &[CovariateProfile], times: &[Vec<f64>]) -> DVector<f64> {
    params.mu_a * loading_vector(params.alpha, params.gamma1, params.gamma2, profiles, times)
}

/// Simulated degradation paths on a shared grid, exact at grid points.
pub struct Paths {
    pub n_paths: usize,
    pub n_units: usize,
    pub grid: Vec<f64>,
    /// Row-major [path][unit][time].
    data: Vec<f64>,
}

impl Paths {
    pub fn value(&self, path: usize, unit: usize, time_ix: usize) -> f64 {
        self.data[(path * self.n_units + unit) * self.grid.len() + time_ix]
    }
}

/// Draw `n_paths` exact joint realizations of all units on a shared time grid.
/// Each draw is multivariate normal with the model's mean and covariance; no
/// Euler discretization error at grid points. Deterministic given the seed.
pub fn simulate_paths(
    params: &ModelParams,
    profiles: &[CovariateProfile],
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Paths> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be >= 1"));
    }
    let times: Vec<Vec<f64>> = profiles.iter().map(|_| grid.to_vec()).collect();
    let cov = assemble_covariance(params, profiles, &times)?;
    let mean = mean_vector(params, profiles, &times);
    let m = mean.len();
    // Degenerate noiseless case: every path is the mean.
    let noiseless = params.tau_a2 == 0.0 && params.sigma() == 0.0;
    let chol = if noiseless { None } else { Some(cholesky_factor(&cov)?) };
    let mut rng = derive_rng(seed, "simulate-paths", &[]);
    let mut data = Vec::with_capacity(n_paths * m);
    let mut z = DVector::<f64>::zeros(m);
    for _ in 0..n_paths {
        match &chol {
            None => data.extend(mean.iter()),
            Some(l) => {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let draw = &mean + l * &z;
                data.extend(draw.iter());
            }
        }
    }
    Ok(Paths { n_paths, n_units: profiles.len(), grid: grid.to_vec(), data })
}

/// Conditional Gaussian law of target coordinates given observed history.
pub struct ConditionalLaw {
    pub targets: Vec<(usize, f64)>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Closed-form Gaussian conditioning of `(unit, time)` targets on an observed
/// history, under the joint covariance of history plus targets.
pub fn conditional_law(
    params: &ModelParams,
    profiles: &[CovariateProfile],
    history: &ObservationSet,
    targets: &[(usize, f64)],
) -> Result<ConditionalLaw> {
    params.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("at least one target required"));
    }
    if history.n_units() != profiles.len() {
        return Err(Error::invalid("history unit count must match profile count"));
    }
    for &(u, t) in targets {
        if u == 0 || u > profiles.len() {
            return Err(Error::invalid(format!("target unit {u} out of range")));
        }
        if !(t > 0.0) {
            return Err(Error::invalid("target time must be > 0"));
        }
        if let Some((last, _)) = history.last_observation(u) {
            if t <= last {
                return Err(Error::invalid(format!(
                    "target time {t} for unit {u} does not exceed last observed time {last}"
                )));
            }
        }
    }
    // Merged per-unit grids: history times then target times, kept sorted.
    let n_units = profiles.len();
    let mut merged: Vec<Vec<(f64, bool, usize)>> = Vec::with_capacity(n_units); // (time, is_target, target_ix)
    for u in 1..=n_units {
        let mut v: Vec<(f64, bool, usize)> =
            history.times(u).into_iter().map(|t| (t, false, usize::MAX)).collect();
        for (ix, &(tu, tt)) in targets.iter().enumerate() {
            if tu == u {
                v.push((tt, true, ix));
            }
        }
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in v.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid("duplicate target times within a unit"));
            }
        }
        merged.push(v);
    }
    let grids: Vec<Vec<f64>> = merged.iter().map(|v| v.iter().map(|e| e.0).collect()).collect();
    let cov = assemble_covariance(params, profiles, &grids)?;
    let mean = mean_vector(params, profiles, &grids);

    // Flattened index maps.
    let mut hist_ix = Vec::new();
    let mut targ_ix = vec![usize::MAX; targets.len()];
    let mut flat = 0usize;
    for v in &merged {
        for &(_, is_target, tix) in v {
            if is_target {
                targ_ix[tix] = flat;
            } else {
                hist_ix.push(flat);
            }
            flat += 1;
        }
    }
    let nh = hist_ix.len();
    let nt = targets.len();

    if nh == 0 {
        let mean_t = DVector::from_fn(nt, |i, _| mean[targ_ix[i]]);
        let cov_t = DMatrix::from_fn(nt, nt, |i, j| cov[(targ_ix[i], targ_ix[j])]);
        return Ok(ConditionalLaw { targets: targets.to_vec(), mean: mean_t, cov: cov_t });
    }

    let cov_hh = DMatrix::from_fn(nh, nh, |i, j| cov[(hist_ix[i], hist_ix[j])]);
    let cov_th = DMatrix::from_fn(nt, nh, |i, j| cov[(targ_ix[i], hist_ix[j])]);
    let cov_tt = DMatrix::from_fn(nt, nt, |i, j| cov[(targ_ix[i], targ_ix[j])]);
    let mean_h = DVector::from_fn(nh, |i, _| mean[hist_ix[i]]);
    let mean_t = DVector::from_fn(nt, |i, _| mean[targ_ix[i]]);

    let y: Vec<f64> = history.stacked_levels();
    debug_assert_eq!(y.len(), nh);
    let resid = DVector::from_vec(y) - &mean_h;

    let l = cholesky_factor(&cov_hh).map_err(|e| match e {
        Error::NotPositiveDefinite { minor } => {
            Error::Singular(format!("conditioning block singular at leading minor {minor}"))
        }
        other => other,
    })?;
    let solve_resid = cholesky_solve(&l, &resid);
    let cond_mean = &mean_t + &cov_th * solve_resid;
    // cov_tt - cov_th * cov_hh^{-1} * cov_ht
    let mut correction = DMatrix::<f64>::zeros(nt, nt);
    for j in 0..nt {
        let row = cov_th.row(j).transpose();
        let s = cholesky_solve(&l, &row);
        for i in 0..nt {
            correction[(i, j)] = cov_th.row(i).transpose().dot(&s);
        }
    }
    let mut cond_cov = cov_tt - correction;
    // symmetrize against roundoff
    for i in 0..nt {
        for j in (i + 1)..nt {
            let v = 0.5 * (cond_cov[(i, j)] + cond_cov[(j, i)]);
            cond_cov[(i, j)] = v;
            cond_cov[(j, i)] = v;
        }
    }
    Ok(ConditionalLaw { targets: targets.to_vec(), mean: cond_mean, cov: cond_cov })
}

/// Draw from the conditional law of targets given history. Deterministic given
/// the seed. Rows are draws, columns follow target order.
pub fn conditional_sample(
    params: &ModelParams,
    profiles: &[CovariateProfile],
    history: &ObservationSet,
    targets: &[(usize, f64)],
    n_draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be >= 1"));
    }
    let law = conditional_law(params, profiles, history, targets)?;
    let nt = targets.len();
    // A conditional covariance can be numerically semi-definite; fall back to
    // a symmetric eigenvalue square root when the pivot check trips.
    let l = match cholesky_factor(&law.cov) {
        Ok(l) => l,
        Err(Error::NotPositiveDefinite { .. }) => {
            let eig = law.cov.clone().symmetric_eigen();
            let mut root = eig.eigenvectors.clone();
            for (c, ev) in eig.eigenvalues.iter().enumerate() {
                let s = ev.max(0.0).sqrt();
                for r in 0..nt {
                    root[(r, c)] *= s;
                }
            }
            root
        }
        Err(e) => return Err(e),
    };
    let mut rng = derive_rng(seed, "conditional-sample", &[]);
    let mut out = DMatrix::<f64>::zeros(n_draws, nt);
    let mut z = DVector::<f64>::zeros(nt);
    for d in 0..n_draws {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let draw = &law.mean + &l * &z;
        for c in 0..nt {
            out[(d, c)] = draw[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use approx::assert_relative_eq;

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

    #[test]
    fn drift_covariance_cases() {
        assert_relative_eq!(drift_covariance(0.01, 0.5, 3, 3), 0.01);
        assert_relative_eq!(drift_covariance(0.01, 0.5, 3, 4), 0.005);
        assert_relative_eq!(drift_covariance(0.01, 0.5, 1, 5), 0.0);
    }

    #[test]
    fn moments_at_zero() {
        let p = params();
        let prof = CovariateProfile::constant(1, 25.0, 1.0);
        let (m, v) = marginal_moments(&p, &prof, 0.0).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn moments_fixed_effects_case() {
        // tau_a2 = 0, sigma^2 = 2, lambda = 1, Lambda = 3 -> variance 6
        let p = ModelParams {
            tau_a2: 0.0,
            sigma_override: Some(2.0_f64.sqrt()),
            gamma1: 0.0,
            gamma2: 0.0,
            alpha: 1.0,
            ..params()
        };
        let prof = CovariateProfile::constant(1, 25.0, 1.0);
        let (_, v) = marginal_moments(&p, &prof, 3.0).unwrap();
        assert_relative_eq!(v, 6.0, max_relative = 1e-12);
    }

    #[test]
    fn moments_scalar_arithmetic_case() {
        // mu=1, tau2=0.01, kappa=10, lambda=1, alpha=1, t=2:
        // mean = 2, var = 0.01*4 + 1*2 = 2.04
        let p = ModelParams {
            tau_a2: 0.01,
            kappa: 10.0,
            gamma1: 0.0,
            gamma2: 0.0,
            alpha: 1.0,
            ..params()
        };
        let prof = CovariateProfile::constant(1, 25.0, 1.0);
        let (m, v) = marginal_moments(&p, &prof, 2.0).unwrap();
        assert_relative_eq!(m, 2.0, max_relative = 1e-12);
        assert_relative_eq!(v, 2.04, max_relative = 1e-12);
    }

    #[test]
    fn single_point_covariance_matches_marginal_variance() {
        let p = params();
        let prof = vec![CovariateProfile::constant(1, 30.0, 1.2)];
        let cov = assemble_covariance(&p, &prof, &[vec![2.5]]).unwrap();
        let (_, v) = marginal_moments(&p, &prof[0], 2.5).unwrap();
        assert_relative_eq!(cov[(0, 0)], v, max_relative = 1e-12);
    }

    #[test]
    fn nonadjacent_blocks_are_zero() {
        let p = params();
        let profs = vec![
            CovariateProfile::constant(1, 30.0, 1.2),
            CovariateProfile::constant(3, 30.0, 1.2),
        ];
        let cov = assemble_covariance(&p, &profs, &[vec![1.0, 2.0], vec![1.5, 3.0]]).unwrap();
        for l in 0..2 {
            for k in 0..2 {
                assert_eq!(cov[(l, 2 + k)], 0.0);
                assert_eq!(cov[(2 + k, l)], 0.0);
            }
        }
    }

    #[test]
    fn covariance_is_bitwise_symmetric() {
        let p = params();
        let profs: Vec<_> = (1..=4).map(|u| CovariateProfile::constant(u, 30.0, 1.2)).collect();
        let grids: Vec<Vec<f64>> = (0..4).map(|i| vec![0.5 + i as f64 * 0.1, 2.0, 4.0]).collect();
        let cov = assemble_covariance(&p, &profs, &grids).unwrap();
        for i in 0..cov.nrows() {
            for j in 0..cov.ncols() {
                assert!(cov[(i, j)].to_bits() == cov[(j, i)].to_bits());
            }
        }
    }

    #[test]
    fn rejects_nonincreasing_times() {
        let p = params();
        let profs = vec![CovariateProfile::constant(1, 30.0, 1.2)];
        assert!(assemble_covariance(&p, &profs, &[vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn noiseless_paths_follow_the_mean_exactly() {
        let p = ModelParams { tau_a2: 0.0, sigma_override: Some(0.0), ..params() };
        let profs = vec![CovariateProfile::constant(1, 30.0, 1.2)];
        let grid = [1.0, 2.0, 3.0];
        let paths = simulate_paths(&p, &profs, &grid, 5, 42).unwrap();
        for path in 0..5 {
            for (ix, &t) in grid.iter().enumerate() {
                let expect = p.mu_a * profs[0].lambda(t, p.gamma1, p.gamma2) * t.powf(p.alpha);
                assert_relative_eq!(paths.value(path, 0, ix), expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn conditional_with_empty_history_equals_marginal() {
        let p = params();
        let profs = vec![CovariateProfile::constant(1, 30.0, 1.2)];
        let hist = ObservationSet::new(1, vec![]).unwrap();
        let law = conditional_law(&p, &profs, &hist, &[(1, 2.0)]).unwrap();
        let (m, v) = marginal_moments(&p, &profs[0], 2.0).unwrap();
        assert_relative_eq!(law.mean[0], m, max_relative = 1e-12);
        assert_relative_eq!(law.cov[(0, 0)], v, max_relative = 1e-12);
    }

    #[test]
    fn conditional_rejects_target_not_past_history() {
        let p = params();
        let profs = vec![CovariateProfile::constant(1, 30.0, 1.2)];
        let hist =
            ObservationSet::new(1, vec![Observation { unit_id: 1, time: 2.0, level: 1.0 }]).unwrap();
        assert!(conditional_law(&p, &profs, &hist, &[(1, 2.0)]).is_err());
        assert!(conditional_law(&p, &profs, &hist, &[(1, 1.0)]).is_err());
    }

    #[test]
    fn conditional_variance_never_exceeds_marginal() {
        let p = params();
        let profs: Vec<_> = (1..=2).map(|u| CovariateProfile::constant(u, 30.0, 1.2)).collect();
        let hist = ObservationSet::new(
            2,
            vec![
                Observation { unit_id: 1, time: 1.0, level: 1.4 },
                Observation { unit_id: 2, time: 1.5, level: 2.3 },
            ],
        )
        .unwrap();
        let law = conditional_law(&p, &profs, &hist, &[(1, 3.0), (2, 4.0)]).unwrap();
        for (k, &(u, t)) in law.targets.iter().enumerate() {
            let (_, v) = marginal_moments(&p, &profs[u - 1], t).unwrap();
            assert!(law.cov[(k, k)] <= v + 1e-12);
        }
    }
}
