//! Sequential choice of the next observation time for one unit: analytic
//! score gradients of the augmented marginal log-likelihood, a Fisher
//! information matrix integrated over the predictive law of the next level,
//! and a balanced information-plus-exploration criterion over a candidate set.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cholesky_factor, cholesky_solve, KernelMatrix, RankOneCovariance};
use crate::params::ModelParams;
use crate::profile::CovariateProfile;
use crate::rng::derive_rng;

/// One unit's observed trajectory together with its environmental schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitHistory {
    pub unit_id: usize,
    pub times: Vec<f64>,
    pub levels: Vec<f64>,
    pub profile: CovariateProfile,
}

impl UnitHistory {
    pub fn new(unit_id: usize, times: Vec<f64>, levels: Vec<f64>, profile: CovariateProfile) -> Result<Self> {
        let h = UnitHistory { unit_id, times, levels, profile };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::invalid("history requires at least one observation"));
        }
        if self.times.len() != self.levels.len() {
            return Err(Error::invalid("times and levels must have equal length"));
        }
        if !(self.times[0] > 0.0) {
            return Err(Error::invalid("history times must be strictly positive"));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("history times must be strictly increasing"));
            }
        }
        self.profile.validate()
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// The history extended by one candidate time: augmented loadings, the
/// rank-one covariance over the m+1 grid, and the Gaussian predictive law of
/// the level at the candidate time given the observed history.
#[derive(Debug, Clone)]
pub struct AugmentedVector {
    pub times: Vec<f64>,
    pub history_levels: Vec<f64>,
    pub profile: CovariateProfile,
    pub cov: RankOneCovariance,
    pub pred_mean: f64,
    pub pred_var: f64,
}

impl AugmentedVector {
    pub fn new(theta_hat: &ModelParams, history: &UnitHistory, t_next: f64) -> Result<Self> {
        theta_hat.validate()?;
        history.validate()?;
        if !(theta_hat.tau_a2 > 0.0) {
            return Err(Error::invalid("sequential design requires tau_a2 > 0"));
        }
        if !(t_next > history.last_time()) {
            return Err(Error::invalid(format!(
                "candidate time {t_next} must exceed the last observed time {}",
                history.last_time()
            )));
        }
        let mut times = history.times.clone();
        times.push(t_next);
        let xi = DVector::from_iterator(
            times.len(),
            times.iter().map(|&t| {
                history.profile.lambda(t, theta_hat.gamma1, theta_hat.gamma2) * t.powf(theta_hat.alpha)
            }),
        );
        let kernel = KernelMatrix::new(&times, theta_hat.alpha, theta_hat.kappa)?;
        let cov = RankOneCovariance::new(kernel, xi)?;

        // predictive law of the candidate coordinate given the history block,
        // under the full covariance tau_a2 * Sigma_tilde
        let m = history.times.len();
        let sigma = cov.dense();
        let hist_block = DMatrix::from_fn(m, m, |i, j| sigma[(i, j)]);
        let cross = DVector::from_fn(m, |i, _| sigma[(m, i)]);
        let l = cholesky_factor(&hist_block).map_err(|e| match e {
            Error::NotPositiveDefinite { minor } => {
                Error::Singular(format!("history covariance singular at leading minor {minor}"))
            }
            other => other,
        })?;
        let mean_h = DVector::from_fn(m, |i, _| theta_hat.mu_a * cov.xi()[i]);
        let resid = DVector::from_vec(history.levels.clone()) - mean_h;
        let solved = cholesky_solve(&l, &resid);
        let pred_mean = theta_hat.mu_a * cov.xi()[m] + cross.dot(&solved);
        let solved_cross = cholesky_solve(&l, &cross);
        let pred_var = theta_hat.tau_a2 * (sigma[(m, m)] - cross.dot(&solved_cross));
        if !(pred_var > 0.0) {
            return Err(Error::Singular(format!("nonpositive predictive variance {pred_var}")));
        }
        Ok(AugmentedVector {
            times,
            history_levels: history.levels.clone(),
            profile: history.profile.clone(),
            cov,
            pred_mean,
            pred_var,
        })
    }

    fn stacked(&self, x_next: f64) -> DVector<f64> {
        let mut x = self.history_levels.clone();
        x.push(x_next);
        DVector::from_vec(x)
    }
}

/// Per-loading-entry derivatives of the augmented log-likelihood plus shared
/// intermediates: `g = Sigma_tilde^{-1} r` and the loading-gradient vector
/// `dl/d eta_j = -w_j / B + g_j (mu_a + Xi.g) / tau_a2`.
fn loading_gradient(theta: &ModelParams, aug: &AugmentedVector, x_next: f64) -> (DVector<f64>, DVector<f64>) {
    let xi = aug.cov.xi();
    let w = aug.cov.qinv_xi();
    let b = aug.cov.b_star();
    let r = aug.stacked(x_next) - theta.mu_a * xi;
    let qinv_r = aug.cov.kernel_inverse() * &r;
    let g = &qinv_r - w * (w.dot(&r) / b);
    let scale = (theta.mu_a + xi.dot(&g)) / theta.tau_a2;
    let dl_deta = DVector::from_fn(xi.len(), |j, _| -w[j] / b + g[j] * scale);
    (dl_deta, g)
}

/// Gradient of the augmented log-likelihood in `(gamma1, gamma2)`. The
/// loadings carry the whole dependence: `d eta_j / d gamma_d = eta_j z_d(t_j)`.
pub fn score_gamma(theta_hat: &ModelParams, aug: &AugmentedVector, x_next: f64) -> [f64; 2] {
    let (dl_deta, _) = loading_gradient(theta_hat, aug, x_next);
    let xi = aug.cov.xi();
    let mut out = [0.0; 2];
    for (j, &t) in aug.times.iter().enumerate() {
        out[0] += dl_deta[j] * xi[j] * aug.profile.z1(t);
        out[1] += dl_deta[j] * xi[j] * aug.profile.z2(t);
    }
    out
}

/// Derivative of the augmented log-likelihood in `alpha`: the loading channel
/// `d eta_j / d alpha = lambda(t_j) t_j^alpha ln t_j` plus the kernel channel
/// through the transformed-time increments.
pub fn score_alpha(theta_hat: &ModelParams, aug: &AugmentedVector, x_next: f64) -> f64 {
    let (dl_deta, g) = loading_gradient(theta_hat, aug, x_next);
    let xi = aug.cov.xi();
    let kernel = aug.cov.kernel();
    let n = aug.times.len();

    let mut s = 0.0;
    for (j, &t) in aug.times.iter().enumerate() {
        // lambda * Lambda * ln t = eta_j ln t_j
        s += dl_deta[j] * xi[j] * t.ln();
    }

    // kernel channel of ln|Sigma_tilde| = ln|kappa^2 Q| + ln B
    let dqinv = kernel.inverse_alpha_derivative();
    let db = xi.dot(&(&dqinv * xi));
    s += -0.5 * (kernel.logdet_alpha_derivative() + db / aug.cov.b_star());

    // kernel channel of the quadratic form: dD/dalpha = -g^T (dQ/dalpha) g
    let k2 = theta_hat.kappa * theta_hat.kappa;
    let lam = kernel.transformed_times();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            let m = i.min(j);
            quad += g[i] * g[j] * k2 * lam[m] * aug.times[m].ln();
        }
    }
    s + quad / (2.0 * theta_hat.tau_a2)
}

/// Where the candidate times for the next observation come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum CandidateSet {
    /// Open-ended grid `t_m + delta, t_m + delta + step, ..., <= t_max`.
    Interval { t_max: f64, delta: f64, step: f64 },
    /// Allowed windows; each is discretized as `lo + step, ..., <= hi`.
    Windows { windows: Vec<(f64, f64)>, step: f64 },
}

impl Default for CandidateSet {
    fn default() -> Self {
        CandidateSet::Interval { t_max: 10.0, delta: 0.05, step: 0.05 }
    }
}

impl CandidateSet {
    /// Candidate times strictly after `t_last`, sorted, deduplicated.
    pub fn times(&self, t_last: f64) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            CandidateSet::Interval { t_max, delta, step } => {
                let mut t = t_last + delta;
                while t <= t_max + 1e-9 {
                    out.push(t);
                    t += step;
                }
            }
            CandidateSet::Windows { windows, step } => {
                for &(lo, hi) in windows {
                    let mut t = lo + step;
                    while t <= hi + 1e-9 {
                        if t > t_last {
                            out.push(t);
                        }
                        t += step;
                    }
                }
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CandidateSet::Interval { t_max, delta, step } => {
                if !(*t_max > 0.0) || !(*delta > 0.0) || !(*step > 0.0) {
                    return Err(Error::invalid("interval candidate set requires positive t_max, delta, step"));
                }
            }
            CandidateSet::Windows { windows, step } => {
                if windows.is_empty() || !(*step > 0.0) {
                    return Err(Error::invalid("windowed candidate set requires windows and a positive step"));
                }
                for &(lo, hi) in windows {
                    if !(hi > lo) {
                        return Err(Error::invalid("each window must satisfy lo < hi"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionConfig {
    pub omega1: f64,
    pub omega2: f64,
    #[serde(default)]
    pub candidates: CandidateSet,
    /// Gauss-Hermite node count for the information integral.
    pub quadrature_nodes: usize,
    /// Monte Carlo draw count for the fallback integrator.
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    pub seed: u64,
}

fn default_mc_draws() -> usize {
    50_000
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig {
            omega1: 0.5,
            omega2: 0.5,
            candidates: CandidateSet::default(),
            quadrature_nodes: 32,
            mc_draws: default_mc_draws(),
            seed: 0,
        }
    }
}

impl CriterionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega1 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::invalid("criterion weights must be nonnegative"));
        }
        if (self.omega1 + self.omega2 - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("criterion weights must sum to 1"));
        }
        if self.quadrature_nodes == 0 {
            return Err(Error::invalid("quadrature_nodes must be >= 1"));
        }
        self.candidates.validate()
    }
}

/// Gauss-Hermite nodes and weights (physicists' convention) from the
/// symmetric Jacobi matrix; weights are returned already divided by sqrt(pi)
/// so they sum to 1.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            (node, v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
}

fn score_vector(theta: &ModelParams, aug: &AugmentedVector, x_next: f64) -> [f64; 3] {
    let sg = score_gamma(theta, aug, x_next);
    [score_alpha(theta, aug, x_next), sg[0], sg[1]]
}

/// Expected outer product of the score in `(alpha, gamma1, gamma2)` over the
/// Gaussian predictive law of the candidate level, by Gauss-Hermite
/// quadrature. Symmetric positive semidefinite by construction.
pub fn fim(
    theta_hat: &ModelParams,
    history: &UnitHistory,
    t_next: f64,
    config: &CriterionConfig,
) -> Result<Matrix3<f64>> {
    config.validate()?;
    let aug = AugmentedVector::new(theta_hat, history, t_next)?;
    let (nodes, weights) = gauss_hermite(config.quadrature_nodes);
    let sd = aug.pred_var.sqrt();
    let mut info = Matrix3::<f64>::zeros();
    for (&z, &w) in nodes.iter().zip(&weights) {
        let x = aug.pred_mean + std::f64::consts::SQRT_2 * sd * z;
        let s = score_vector(theta_hat, &aug, x);
        for i in 0..3 {
            for j in 0..3 {
                info[(i, j)] += w * s[i] * s[j];
            }
        }
    }
    // symmetrize against roundoff
    for i in 0..3 {
        for j in (i + 1)..3 {
            let v = 0.5 * (info[(i, j)] + info[(j, i)]);
            info[(i, j)] = v;
            info[(j, i)] = v;
        }
    }
    Ok(info)
}

/// Plain Monte Carlo counterpart of `fim`, used as an integration audit.
pub fn fim_mc(
    theta_hat: &ModelParams,
    history: &UnitHistory,
    t_next: f64,
    config: &CriterionConfig,
) -> Result<Matrix3<f64>> {
    config.validate()?;
    let aug = AugmentedVector::new(theta_hat, history, t_next)?;
    let sd = aug.pred_var.sqrt();
    let mut rng = derive_rng(config.seed, "fim-mc", &[]);
    let mut info = Matrix3::<f64>::zeros();
    for _ in 0..config.mc_draws {
        let x = aug.pred_mean + sd * rng.sample::<f64, _>(StandardNormal);
        let s = score_vector(theta_hat, &aug, x);
        for i in 0..3 {
            for j in 0..3 {
                info[(i, j)] += s[i] * s[j];
            }
        }
    }
    info /= config.mc_draws as f64;
    Ok(info)
}

fn logdet3(m: &Matrix3<f64>) -> Option<f64> {
    let det = m.determinant();
    if det > 0.0 {
        Some(det.ln())
    } else {
        None
    }
}

/// Raw exploration score: the reciprocal transformed-time rate `1 / Lambda'`
/// for alpha >= 1, the rate itself for alpha < 1. Both favor early times.
fn exploration_raw(alpha: f64, t: f64) -> f64 {
    let rate = alpha * t.powf(alpha - 1.0);
    if alpha >= 1.0 {
        1.0 / rate
    } else {
        rate
    }
}

/// Normalization constant for the information term: the absolute
/// log-determinant of the information of the history alone, computed by
/// treating the last observed point as the augmentation of the rest. Falls
/// back to 1 when the history is too short or the determinant degenerates.
fn info_normalizer(theta_hat: &ModelParams, history: &UnitHistory, config: &CriterionConfig) -> f64 {
    if history.times.len() < 2 {
        return 1.0;
    }
    let m = history.times.len();
    let reduced = UnitHistory {
        unit_id: history.unit_id,
        times: history.times[..m - 1].to_vec(),
        levels: history.levels[..m - 1].to_vec(),
        profile: history.profile.clone(),
    };
    match fim(theta_hat, &reduced, history.times[m - 1], config) {
        Ok(i0) => match logdet3(&i0) {
            Some(ld) if ld.abs() > 1e-9 => ld.abs(),
            _ => 1.0,
        },
        Err(_) => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub t: f64,
    pub gamma: f64,
    pub info_term: f64,
    pub exploration_term: f64,
    /// Set when det I <= 0 forced the information term to zero.
    pub degenerate_information: bool,
}

/// The balanced criterion at one candidate time, with explicit normalizers:
/// `omega1 |ln det I| / n0 + omega2 raw_exploration / c_norm`.
pub fn criterion(
    theta_hat: &ModelParams,
    history: &UnitHistory,
    t_next: f64,
    config: &CriterionConfig,
    n0: f64,
    c_norm: f64,
) -> Result<CriterionValue> {
    let info = fim(theta_hat, history, t_next, config)?;
    let (info_term, degenerate) = match logdet3(&info) {
        Some(ld) => (config.omega1 * ld.abs() / n0, false),
        None => (0.0, true),
    };
    let exploration_term = config.omega2 * exploration_raw(theta_hat.alpha, t_next) / c_norm;
    Ok(CriterionValue {
        t: t_next,
        gamma: info_term + exploration_term,
        info_term,
        exploration_term,
        degenerate_information: degenerate,
    })
}

/// Evaluate the criterion over the whole candidate set and return the argmax
/// together with the full trace. Ties go to the earliest time. Deterministic.
pub fn next_time(
    theta_hat: &ModelParams,
    history: &UnitHistory,
    config: &CriterionConfig,
) -> Result<(f64, Vec<CriterionValue>)> {
    config.validate()?;
    history.validate()?;
    let candidates = config.candidates.times(history.last_time());
    if candidates.is_empty() {
        return Err(Error::invalid("candidate set is empty past the last observed time"));
    }
    let c_norm = candidates
        .iter()
        .map(|&t| exploration_raw(theta_hat.alpha, t))
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let n0 = if config.omega1 > 0.0 { info_normalizer(theta_hat, history, config) } else { 1.0 };
    let mut trace = Vec::with_capacity(candidates.len());
    for &t in &candidates {
        trace.push(criterion(theta_hat, history, t, config, n0, c_norm)?);
    }
    let mut best = &trace[0];
    for v in &trace[1..] {
        if v.gamma > best.gamma {
            best = v;
        }
    }
    Ok((best.t, trace))
}
