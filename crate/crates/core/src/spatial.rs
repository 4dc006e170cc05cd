//! Space-filling selection of which units to observe at which epochs: the
//! (epoch, unit) picks are mapped to points in the unit square and the
//! wrap-around L2 discrepancy is minimized under an exact per-epoch budget.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Wrap-around L2 discrepancy (squared) of a point list in [0,1]^2:
/// `-16/9 + (1/n^2) sum_p sum_q prod_d phi(s_pd, s_qd)` with
/// `phi(x, y) = 3/2 - |x-y| + |x-y|^2`. Torus-shift invariant.
pub fn wd2(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("wd2 requires at least one point"));
    }
    for &(u, v) in points {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("point ({u}, {v}) outside the unit square")));
        }
    }
    let n = points.len() as f64;
    let mut acc = 0.0;
    for &p in points {
        for &q in points {
            acc += phi(p.0, q.0) * phi(p.1, q.1);
        }
    }
    Ok(-16.0 / 9.0 + acc / (n * n))
}

fn phi(x: f64, y: f64) -> f64 {
    let w = (x - y).abs();
    1.5 - w + w * w
}

/// A feasible observation design: for each of `n_epochs` columns, exactly
/// `budget` of the `n_units` rows are selected. Points live on the grid
/// `u_k = (k - 0.5)/o`, `v_j = (j - 0.5)/L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPointSet {
    n_epochs: usize,
    n_units: usize,
    budget: usize,
    /// Selected 0-based unit rows per epoch column, each sorted, length = budget.
    columns: Vec<Vec<usize>>,
}

impl DesignPointSet {
    pub fn new(n_epochs: usize, n_units: usize, budget: usize, columns: Vec<Vec<usize>>) -> Result<Self> {
        validate_dims(n_epochs, n_units, budget)?;
        if columns.len() != n_epochs {
            return Err(Error::invalid("one selection list per epoch required"));
        }
        let mut columns = columns;
        for col in &mut columns {
            col.sort_unstable();
            if col.len() != budget {
                return Err(Error::invalid(format!("each epoch must select exactly {budget} units")));
            }
            if col.iter().any(|&j| j >= n_units) {
                return Err(Error::invalid("unit row index out of range"));
            }
            if col.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid("duplicate unit within an epoch"));
            }
        }
        Ok(DesignPointSet { n_epochs, n_units, budget, columns })
    }

    /// Uniformly random feasible design.
    pub fn random(n_epochs: usize, n_units: usize, budget: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_dims(n_epochs, n_units, budget)?;
        let all: Vec<usize> = (0..n_units).collect();
        let columns = (0..n_epochs)
            .map(|_| {
                let mut pool = all.clone();
                pool.shuffle(rng);
                let mut col: Vec<usize> = pool[..budget].to_vec();
                col.sort_unstable();
                col
            })
            .collect();
        Ok(DesignPointSet { n_epochs, n_units, budget, columns })
    }

    pub fn n_epochs(&self) -> usize {
        self.n_epochs
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    fn u(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.n_epochs as f64
    }

    fn v(&self, j: usize) -> f64 {
        (j as f64 + 0.5) / self.n_units as f64
    }

    /// The point set in [0,1]^2, column-major.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.n_epochs * self.budget);
        for (k, col) in self.columns.iter().enumerate() {
            for &j in col {
                pts.push((self.u(k), self.v(j)));
            }
        }
        pts
    }

    pub fn to_matrix(&self) -> ObservationMatrix {
        let mut w = vec![vec![0u8; self.n_epochs]; self.n_units];
        for (k, col) in self.columns.iter().enumerate() {
            for &j in col {
                w[j][k] = 1;
            }
        }
        ObservationMatrix { w }
    }
}

fn validate_dims(n_epochs: usize, n_units: usize, budget: usize) -> Result<()> {
    if n_epochs == 0 {
        return Err(Error::invalid("epoch count must be >= 1"));
    }
    if budget == 0 || budget > n_units {
        return Err(Error::invalid(format!("budget must lie in 1..={n_units}")));
    }
    Ok(())
}

/// Binary unit-by-epoch selection matrix; every column sums to the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    /// Rows are units, columns are epochs.
    pub w: Vec<Vec<u8>>,
}

impl ObservationMatrix {
    pub fn column_sums(&self) -> Vec<usize> {
        let o = self.w.first().map_or(0, Vec::len);
        (0..o).map(|k| self.w.iter().filter(|row| row[k] == 1).count()).collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.w.iter().map(|row| row.iter().filter(|&&x| x == 1).count()).collect()
    }

    /// 1-based unit ids selected at the given epoch column.
    pub fn selected_units(&self, epoch_ix: usize) -> Vec<usize> {
        self.w
            .iter()
            .enumerate()
            .filter(|(_, row)| row[epoch_ix] == 1)
            .map(|(j, _)| j + 1)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    ThresholdAccepting,
    RandomSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    /// Explicit threshold sequence; when absent a self-scaling geometric
    /// schedule is derived from warm-up moves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if let Some(thr) = &self.thresholds {
            if thr.len() != self.iterations {
                return Err(Error::invalid("threshold sequence length must equal iterations"));
            }
            if thr.iter().any(|&t| t < 0.0 || !t.is_finite()) {
                return Err(Error::invalid("thresholds must be finite and nonnegative"));
            }
            if thr.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::invalid("thresholds must be nonincreasing"));
            }
            if *thr.last().unwrap() != 0.0 {
                return Err(Error::invalid("threshold sequence must end at 0"));
            }
        }
        Ok(())
    }
}

/// One exchange move: within epoch column `col`, deselect `row_out` and
/// select `row_in`. Column sums are preserved by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapMove {
    pub col: usize,
    pub row_out: usize,
    pub row_in: usize,
}

/// Draw a random feasible exchange move. Saturated columns (budget = L) admit
/// no move; another column is drawn, and None is returned when every column is
/// saturated.
pub fn swap_neighbor(design: &DesignPointSet, rng: &mut ChaCha8Rng) -> Option<SwapMove> {
    if design.budget == design.n_units {
        return None;
    }
    let col = rng.gen_range(0..design.n_epochs);
    let selected = &design.columns[col];
    let out_ix = rng.gen_range(0..selected.len());
    let row_out = selected[out_ix];
    let unselected: Vec<usize> = (0..design.n_units).filter(|j| !selected.contains(j)).collect();
    let row_in = unselected[rng.gen_range(0..unselected.len())];
    Some(SwapMove { col, row_out, row_in })
}

/// Exact change in wd2 from applying `mv` to `design`. Diagonal self-terms
/// cancel, so only cross terms against the n-1 unchanged points contribute.
pub fn wd2_delta(design: &DesignPointSet, mv: &SwapMove) -> f64 {
    let n = (design.n_epochs * design.budget) as f64;
    let u_col = design.u(mv.col);
    let p_out = (u_col, design.v(mv.row_out));
    let p_in = (u_col, design.v(mv.row_in));
    let mut acc = 0.0;
    for (k, col) in design.columns.iter().enumerate() {
        let uq = design.u(k);
        for &j in col {
            if k == mv.col && j == mv.row_out {
                continue;
            }
            let q = (uq, design.v(j));
            acc += phi(p_in.0, q.0) * phi(p_in.1, q.1) - phi(p_out.0, q.0) * phi(p_out.1, q.1);
        }
    }
    2.0 * acc / (n * n)
}

fn apply_move(design: &mut DesignPointSet, mv: &SwapMove) {
    let col = &mut design.columns[mv.col];
    let pos = col.iter().position(|&j| j == mv.row_out).expect("row_out selected");
    col[pos] = mv.row_in;
    col.sort_unstable();
}

fn default_thresholds(design: &DesignPointSet, iterations: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // self-scaling schedule: 75th percentile of |delta| over warm-up moves,
    // geometric decay, identically zero over the final tenth
    let mut mags: Vec<f64> = (0..200)
        .filter_map(|_| swap_neighbor(design, rng))
        .map(|mv| wd2_delta(design, &mv).abs())
        .filter(|d| *d > 0.0)
        .collect();
    if mags.is_empty() {
        return vec![0.0; iterations];
    }
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thr0 = mags[((mags.len() * 3) / 4).min(mags.len() - 1)];
    let zero_from = iterations - iterations / 10 - 1;
    (0..iterations)
        .map(|i| {
            if i >= zero_from || zero_from == 0 {
                0.0
            } else {
                thr0 * 1e-3_f64.powf(i as f64 / zero_from as f64)
            }
        })
        .collect()
}

/// Minimize wd2 over feasible designs by local exchange search. Random swap
/// accepts strictly improving moves only; threshold accepting also takes
/// moves whose wd2 increase is at most the current threshold. Returns the
/// best design seen. Deterministic given `config.seed`.
pub fn optimize_design(
    n_epochs: usize,
    n_units: usize,
    budget: usize,
    config: &SearchConfig,
) -> Result<(ObservationMatrix, f64)> {
    config.validate()?;
    validate_dims(n_epochs, n_units, budget)?;
    let mut rng = derive_rng(config.seed, "design-search", &[]);
    let mut design = DesignPointSet::random(n_epochs, n_units, budget, &mut rng)?;
    if budget == n_units {
        // the saturated design is the unique feasible one
        let value = wd2(&design.points())?;
        return Ok((design.to_matrix(), value));
    }
    let thresholds = match (&config.thresholds, config.algorithm) {
        (Some(thr), Algorithm::ThresholdAccepting) => thr.clone(),
        (None, Algorithm::ThresholdAccepting) => default_thresholds(&design, config.iterations, &mut rng),
        (_, Algorithm::RandomSwap) => Vec::new(),
    };

    let mut current = wd2(&design.points())?;
    let mut best = design.clone();
    let mut best_value = current;
    for it in 0..config.iterations {
        let Some(mv) = swap_neighbor(&design, &mut rng) else { break };
        let delta = wd2_delta(&design, &mv);
        let accept = match config.algorithm {
            Algorithm::RandomSwap => delta < 0.0,
            Algorithm::ThresholdAccepting => delta <= thresholds[it],
        };
        if accept {
            apply_move(&mut design, &mv);
            current += delta;
            if current < best_value {
                best = design.clone();
                best_value = current;
            }
        }
        // periodic audit keeps accumulated roundoff out of the running value
        if (it + 1) % 1000 == 0 {
            current = wd2(&design.points())?;
        }
    }
    best_value = wd2(&best.points())?;
    Ok((best.to_matrix(), best_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn single_point_value() {
        // phi(x,x) = 3/2 in each dimension: -16/9 + 9/4 = 17/36
        let v = wd2(&[(0.37, 0.91)]).unwrap();
        assert_relative_eq!(v, 17.0 / 36.0, max_relative = 1e-14);
    }

    #[test]
    fn phi_component_case() {
        assert_relative_eq!(phi(0.2, 0.7), 1.25, max_relative = 1e-14);
    }

    #[test]
    fn torus_shift_invariance() {
        let pts = vec![(0.05, 0.1), (0.35, 0.9), (0.75, 0.3), (0.95, 0.5)];
        let shifted: Vec<(f64, f64)> =
            pts.iter().map(|&(u, v)| ((u + 0.3) % 1.0, (v + 0.3) % 1.0)).collect();
        let a = wd2(&pts).unwrap();
        let b = wd2(&shifted).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn rejects_out_of_square_points() {
        assert!(wd2(&[(1.2, 0.5)]).is_err());
        assert!(wd2(&[]).is_err());
    }

    #[test]
    fn delta_matches_full_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut design = DesignPointSet::random(6, 5, 3, &mut rng).unwrap();
        for _ in 0..50 {
            let mv = swap_neighbor(&design, &mut rng).unwrap();
            let before = wd2(&design.points()).unwrap();
            let delta = wd2_delta(&design, &mv);
            apply_move(&mut design, &mv);
            let after = wd2(&design.points()).unwrap();
            assert!((after - before - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_design_has_no_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let design = DesignPointSet::random(4, 3, 3, &mut rng).unwrap();
        assert!(swap_neighbor(&design, &mut rng).is_none());
    }

    #[test]
    fn two_row_single_column_toggles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let design = DesignPointSet::new(1, 2, 1, vec![vec![0]]).unwrap();
        for _ in 0..5 {
            let mv = swap_neighbor(&design, &mut rng).unwrap();
            assert_eq!((mv.col, mv.row_out, mv.row_in), (0, 0, 1));
        }
    }

    #[test]
    fn saturated_budget_returns_full_grid() {
        let cfg = SearchConfig { algorithm: Algorithm::RandomSwap, iterations: 10, thresholds: None, seed: 7 };
        let (w, value) = optimize_design(4, 3, 3, &cfg).unwrap();
        assert!(w.w.iter().all(|row| row.iter().all(|&x| x == 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = DesignPointSet::random(4, 3, 3, &mut rng).unwrap();
        assert_relative_eq!(value, wd2(&full.points()).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn optimized_beats_random_baseline() {
        let cfg =
            SearchConfig { algorithm: Algorithm::ThresholdAccepting, iterations: 20_000, thresholds: None, seed: 11 };
        let (w, value) = optimize_design(10, 8, 5, &cfg).unwrap();
        assert_eq!(w.column_sums(), vec![5; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let baseline = (0..100)
            .map(|_| {
                let d = DesignPointSet::random(10, 8, 5, &mut rng).unwrap();
                wd2(&d.points()).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(value <= baseline, "{value} vs baseline {baseline}");
    }

    #[test]
    fn optimized_rows_are_balanced() {
        let cfg =
            SearchConfig { algorithm: Algorithm::ThresholdAccepting, iterations: 20_000, thresholds: None, seed: 5 };
        let (w, _) = optimize_design(10, 8, 5, &cfg).unwrap();
        // 50 picks over 8 rows: balanced selection counts are 6 or 7
        for s in w.row_sums() {
            assert!(s == 6 || s == 7, "row sum {s}");
        }
    }

    #[test]
    fn search_is_deterministic() {
        let cfg = SearchConfig { algorithm: Algorithm::RandomSwap, iterations: 5000, thresholds: None, seed: 21 };
        let a = optimize_design(8, 6, 3, &cfg).unwrap();
        let b = optimize_design(8, 6, 3, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_threshold_ta_matches_swap_trajectory() {
        // with thresholds identically 0 the two accept rules differ only on
        // exact-zero deltas; on this instance none occur, so results agree
        let thr = vec![0.0; 4000];
        let ta = SearchConfig {
            algorithm: Algorithm::ThresholdAccepting,
            iterations: 4000,
            thresholds: Some(thr),
            seed: 13,
        };
        let sw = SearchConfig { algorithm: Algorithm::RandomSwap, iterations: 4000, thresholds: None, seed: 13 };
        let a = optimize_design(7, 5, 2, &ta).unwrap();
        let b = optimize_design(7, 5, 2, &sw).unwrap();
        assert_eq!(a.0, b.0);
    }
}
