//! Derivative-free maximization: a bounded Nelder-Mead simplex with
//! restart-on-stall, plus a seeded low-discrepancy start generator whose
//! first k points are identical for every run requesting >= k starts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Result of one local search.
#[derive(Debug, Clone)]
pub struct LocalOptimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder-Mead maximization of `f` starting at `x0` with initial step sizes
/// `scale`. `f` may return -inf for infeasible points. One restart from the
/// best point is attempted when the simplex collapses before `tol` is met.
pub fn nelder_mead_max<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    scale: &[f64],
    tol: f64,
    max_evals: usize,
) -> LocalOptimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut best = LocalOptimum { point: x0.to_vec(), value: f64::NEG_INFINITY, evals: 0, converged: false };

    let run = |start: &[f64], step: &[f64], f: &mut F, evals: &mut usize, budget: usize| -> LocalOptimum {
        // simplex as (point, value), maximization
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let v0 = f(start);
        *evals += 1;
        simplex.push((start.to_vec(), v0));
        for i in 0..n {
            let mut p = start.to_vec();
            p[i] += step[i];
            let v = f(&p);
            *evals += 1;
            simplex.push((p, v));
        }
        let mut used = n + 1;
        let mut converged = false;
        while used < budget {
            simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            let spread = simplex[0].1 - simplex[n].1;
            if spread.abs() < tol && simplex[0].1.is_finite() {
                converged = true;
                break;
            }
            // centroid of all but worst
            let mut centroid = vec![0.0; n];
            for (p, _) in simplex.iter().take(n) {
                for (c, x) in centroid.iter_mut().zip(p) {
                    *c += x / n as f64;
                }
            }
            let worst = simplex[n].clone();
            let reflect: Vec<f64> =
                centroid.iter().zip(&worst.0).map(|(c, w)| c + (c - w)).collect();
            let fr = f(&reflect);
            used += 1;
            if fr > simplex[0].1 {
                // try expansion
                let expand: Vec<f64> =
                    centroid.iter().zip(&worst.0).map(|(c, w)| c + 2.0 * (c - w)).collect();
                let fe = f(&expand);
                used += 1;
                if fe > fr {
                    simplex[n] = (expand, fe);
                } else {
                    simplex[n] = (reflect, fr);
                }
            } else if fr > simplex[n - 1].1 {
                simplex[n] = (reflect, fr);
            } else {
                // contraction
                let contract: Vec<f64> =
                    centroid.iter().zip(&worst.0).map(|(c, w)| c + 0.5 * (w - c)).collect();
                let fc = f(&contract);
                used += 1;
                if fc > worst.1 {
                    simplex[n] = (contract, fc);
                } else {
                    // shrink toward best
                    let best_p = simplex[0].0.clone();
                    for k in 1..=n {
                        let p: Vec<f64> = simplex[k]
                            .0
                            .iter()
                            .zip(&best_p)
                            .map(|(x, b)| b + 0.5 * (x - b))
                            .collect();
                        let v = f(&p);
                        used += 1;
                        simplex[k] = (p, v);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        // the simplex initialization already bumped the shared counter
        *evals += used - (n + 1);
        LocalOptimum { point: simplex[0].0.clone(), value: simplex[0].1, evals: used, converged }
    };

    let budget = max_evals / 2;
    let first = run(x0, scale, &mut f, &mut evals, budget.max(n + 2));
    if first.value > best.value {
        best = first.clone();
    }
    // restart-on-stall from the best point with a smaller simplex
    let small: Vec<f64> = scale.iter().map(|s| 0.1 * s).collect();
    let second = run(&first.point, &small, &mut f, &mut evals, budget.max(n + 2));
    if second.value > best.value {
        best = second;
    }
    best.evals = evals;
    best
}

/// Low-discrepancy start points in the unit cube with a random (seeded) torus
/// shift. Generated sequentially from a Halton sequence, so the first k
/// points are a prefix of the first k+1: adding starts can only improve the
/// best value found under a shared seed.
pub fn stratified_starts(n_starts: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    (0..n_starts)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let h = halton(i as u64 + 1, PRIMES[d % PRIMES.len()]);
                    (h + shift[d]) % 1.0
                })
                .collect()
        })
        .collect()
}

fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}
