//! Closed-form linear algebra for the model's covariance structure: the
//! Brownian-motion kernel in transformed time (log-determinant and tridiagonal
//! inverse in closed form), the rank-one augmented covariance used by the
//! sequential design, and a Cholesky-based quadratic-form/log-determinant
//! routine shared by all likelihood code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance: a factorization pivot below this times the
/// largest diagonal entry is reported as a positive-definiteness failure
/// rather than silently jittered.
const PIVOT_TOL: f64 = 1e-12;

/// Lower Cholesky factor with explicit failure reporting. The error names the
/// offending leading minor (0-based).
pub fn cholesky_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::invalid("cholesky requires a square matrix"));
    }
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE)) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Solve L x = b for lower-triangular L, in place.
pub fn forward_solve(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solve L^T x = b for lower-triangular L, in place.
pub fn backward_solve(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solve A x = b given the lower Cholesky factor of A.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    forward_solve(l, &mut x);
    backward_solve(l, &mut x);
    x
}

/// `(residual^T cov^{-1} residual, ln|cov|)` from one Cholesky factorization
/// and triangular solves. The explicit inverse is never formed.
pub fn stable_mvn_quadform_logdet(cov: &DMatrix<f64>, residual: &DVector<f64>) -> Result<(f64, f64)> {
    if cov.nrows() != residual.len() {
        return Err(Error::invalid("covariance and residual dimensions disagree"));
    }
    let l = cholesky_factor(cov)?;
    let mut z = residual.clone();
    forward_solve(&l, &mut z);
    let quad = z.dot(&z);
    let logdet = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok((quad, logdet))
}

/// Brownian-motion kernel in transformed time, scaled by `kappa^2`:
/// `Qtilde[l,k] = kappa^2 * min(Lambda(t_l), Lambda(t_k))` on a strictly
/// increasing positive grid. Stores the transformed-time increments
/// `d_k = t_k^alpha - t_{k-1}^alpha` (with `t_0 = 0`), which carry the
/// closed-form determinant and tridiagonal inverse.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    times: Vec<f64>,
    alpha: f64,
    kappa: f64,
    /// Transformed times Lambda(t_k).
    lam: Vec<f64>,
    /// Increments d_k = Lambda(t_k) - Lambda(t_{k-1}), d_1 = Lambda(t_1).
    d: Vec<f64>,
}

impl KernelMatrix {
    pub fn new(times: &[f64], alpha: f64, kappa: f64) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("kernel requires at least one time point"));
        }
        if !(alpha > 0.0) || !(kappa > 0.0) {
            return Err(Error::invalid("kernel requires alpha > 0 and kappa > 0"));
        }
        if !(times[0] > 0.0) {
            return Err(Error::invalid("kernel times must be strictly positive"));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("kernel times must be strictly increasing"));
            }
        }
        let lam: Vec<f64> = times.iter().map(|t| t.powf(alpha)).collect();
        let mut d = Vec::with_capacity(lam.len());
        let mut prev = 0.0;
        for &v in &lam {
            let inc = v - prev;
            if !(inc > 0.0) {
                return Err(Error::invalid("non-positive transformed-time increment"));
            }
            d.push(inc);
            prev = v;
        }
        Ok(KernelMatrix { times: times.to_vec(), alpha, kappa, lam, d })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn transformed_times(&self) -> &[f64] {
        &self.lam
    }

    pub fn increments(&self) -> &[f64] {
        &self.d
    }

    /// Dense `kappa^2 * Q` matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let k2 = self.kappa * self.kappa;
        DMatrix::from_fn(n, n, |i, j| k2 * self.lam[i.min(j)])
    }

    /// Closed-form `ln|kappa^2 Q| = 2 n ln(kappa) + sum ln d_k`.
    pub fn logdet(&self) -> f64 {
        2.0 * (self.len() as f64) * self.kappa.ln() + self.d.iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Closed-form tridiagonal inverse of `kappa^2 Q`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.len();
        let k2 = self.kappa * self.kappa;
        let mut inv = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let diag = if i + 1 < n {
                1.0 / self.d[i] + 1.0 / self.d[i + 1]
            } else {
                1.0 / self.d[i]
            };
            inv[(i, i)] = diag / k2;
            if i + 1 < n {
                let off = -1.0 / self.d[i + 1] / k2;
                inv[(i, i + 1)] = off;
                inv[(i + 1, i)] = off;
            }
        }
        inv
    }

    /// d ln|kappa^2 Q| / d alpha = sum d'_k / d_k, with
    /// d'_k = t_k^alpha ln t_k - t_{k-1}^alpha ln t_{k-1} (t_0 term = 0).
    pub fn logdet_alpha_derivative(&self) -> f64 {
        self.increment_alpha_derivatives()
            .iter()
            .zip(&self.d)
            .map(|(dp, d)| dp / d)
            .sum()
    }

    /// d'_k = t_k^alpha ln t_k - t_{k-1}^alpha ln t_{k-1}.
    pub fn increment_alpha_derivatives(&self) -> Vec<f64> {
        let n = self.len();
        let g = |k: usize| self.lam[k] * self.times[k].ln();
        (0..n).map(|k| if k == 0 { g(0) } else { g(k) - g(k - 1) }).collect()
    }

    /// Entrywise derivative of the tridiagonal inverse with respect to alpha.
    pub fn inverse_alpha_derivative(&self) -> DMatrix<f64> {
        let n = self.len();
        let k2 = self.kappa * self.kappa;
        let dp = self.increment_alpha_derivatives();
        let mut out = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let diag = if i + 1 < n {
                -dp[i] / (self.d[i] * self.d[i]) - dp[i + 1] / (self.d[i + 1] * self.d[i + 1])
            } else {
                -dp[i] / (self.d[i] * self.d[i])
            };
            out[(i, i)] = diag / k2;
            if i + 1 < n {
                let off = dp[i + 1] / (self.d[i + 1] * self.d[i + 1]) / k2;
                out[(i, i + 1)] = off;
                out[(i + 1, i)] = off;
            }
        }
        out
    }
}

/// Rank-one-plus-kernel covariance `Sigma_tilde = Xi Xi^T + kappa^2 Q` with
/// its Sherman-Morrison decomposition cached: `w = (kappa^2 Q)^{-1} Xi` and
/// `B = 1 + Xi^T w`.
#[derive(Debug, Clone)]
pub struct RankOneCovariance {
    kernel: KernelMatrix,
    xi: DVector<f64>,
    qinv: DMatrix<f64>,
    w: DVector<f64>,
    b_star: f64,
}

impl RankOneCovariance {
    pub fn new(kernel: KernelMatrix, xi: DVector<f64>) -> Result<Self> {
        if xi.len() != kernel.len() {
            return Err(Error::invalid("loading vector length must match kernel size"));
        }
        let qinv = kernel.inverse();
        let w = &qinv * &xi;
        let b_star = 1.0 + xi.dot(&w);
        debug_assert!(b_star >= 1.0 - 1e-12);
        Ok(RankOneCovariance { kernel, xi, qinv, w, b_star })
    }

    pub fn kernel(&self) -> &KernelMatrix {
        &self.kernel
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    /// `B = 1 + Xi^T (kappa^2 Q)^{-1} Xi`, always >= 1.
    pub fn b_star(&self) -> f64 {
        self.b_star
    }

    /// `(kappa^2 Q)^{-1} Xi`.
    pub fn qinv_xi(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn kernel_inverse(&self) -> &DMatrix<f64> {
        &self.qinv
    }

    /// Dense `Sigma_tilde = Xi Xi^T + kappa^2 Q`.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut m = self.kernel.dense();
        let n = self.xi.len();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += self.xi[i] * self.xi[j];
            }
        }
        m
    }

    /// `ln|Sigma_tilde| = ln|kappa^2 Q| + ln B`.
    pub fn logdet(&self) -> f64 {
        self.kernel.logdet() + self.b_star.ln()
    }

    /// Sherman-Morrison inverse `Sigma_tilde^{-1} = (kappa^2 Q)^{-1} - w w^T / B`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.qinv.clone();
        let n = inv.nrows();
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] -= self.w[i] * self.w[j] / self.b_star;
            }
        }
        inv
    }
}
