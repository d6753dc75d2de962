//! Block subproblem solvers for the fast unit: randomized coordinate sweeps
//! with exact per-coordinate closed forms, plus exact reference solves.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetDense;
use crate::error::{Error, Result};
use crate::problem::{Family, ProblemSpec, TrainState};

/// Everything the fast unit needs to compute a block update: the block's
/// columns, the round-start state, and the family-appropriate shadow vector.
#[derive(Debug, Clone)]
pub struct LocalBlockView {
    pub block: Vec<usize>,
    d: usize,
    n: usize,
    /// The m block columns, column-major, length d*m.
    cols: Vec<f64>,
    /// alpha restricted to the block at round start.
    pub alpha_snapshot: Vec<f64>,
    /// Shadow vector at round start: v - b for the regression families,
    /// v for the dual SVM.
    shadow0: Vec<f64>,
    /// Block labels (SVM only).
    y: Vec<f64>,
    norms_sq: Vec<f64>,
}

impl LocalBlockView {
    pub fn new(p: &ProblemSpec, data: &DatasetDense, state: &TrainState, block: &[usize]) -> Result<Self> {
        if block.is_empty() {
            return Err(Error::Config("block must be nonempty".into()));
        }
        if block.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("block indices must be unique and ascending".into()));
        }
        if *block.last().unwrap() >= data.n_cols() {
            return Err(Error::Dimension("block index out of range".into()));
        }
        let d = data.n_features();
        let mut cols = Vec::with_capacity(d * block.len());
        let mut norms_sq = Vec::with_capacity(block.len());
        let mut y = Vec::new();
        for &i in block {
            cols.extend_from_slice(data.col(i));
            norms_sq.push(data.col(i).iter().map(|a| a * a).sum());
            if p.family == Family::SvmDual {
                y.push(data.labels()[i]);
            }
        }
        let shadow0 = match p.family {
            Family::Ridge | Family::ElasticNet => state
                .v
                .iter()
                .zip(data.labels())
                .map(|(vi, bi)| vi - bi)
                .collect(),
            Family::SvmDual => state.v.clone(),
        };
        Ok(LocalBlockView {
            block: block.to_vec(),
            d,
            n: data.n_cols(),
            cols,
            alpha_snapshot: block.iter().map(|&i| state.alpha[i]).collect(),
            shadow0,
            y,
            norms_sq,
        })
    }

    pub fn m(&self) -> usize {
        self.block.len()
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.d..(j + 1) * self.d]
    }
}

/// Budget for one block solve: number of randomized full sweeps over the
/// block, and the seed the per-sweep permutations derive from.
#[derive(Debug, Clone, Copy)]
pub struct SolverBudget {
    pub passes: usize,
    pub seed: u64,
}

impl SolverBudget {
    pub fn new(passes: usize, seed: u64) -> Result<Self> {
        if passes == 0 {
            return Err(Error::Config("passes must be >= 1".into()));
        }
        Ok(SolverBudget { passes, seed })
    }
}

/// Exact single-coordinate minimizer for the elastic-net family
/// (soft thresholding). `vtilde` is the shadow A*alpha - b; the caller is
/// responsible for updating it afterwards.
pub fn coord_update_elasticnet(
    a_j: &[f64],
    norm_sq_j: f64,
    alpha_j: f64,
    vtilde: &[f64],
    lambda: f64,
    eta: f64,
    d: usize,
) -> f64 {
    let d = d as f64;
    let denom = norm_sq_j + lambda * eta * d;
    let tau = lambda * d * (1.0 - eta) / denom;
    let dot: f64 = a_j.iter().zip(vtilde).map(|(a, v)| a * v).sum();
    let gamma = (alpha_j * norm_sq_j - dot) / denom;
    gamma.signum() * (gamma.abs() - tau).max(0.0)
}

/// Exact clipped single-coordinate minimizer for the dual SVM. `vhat` is the
/// shadow A*alpha.
pub fn coord_update_svm(
    a_j: &[f64],
    norm_sq_j: f64,
    y_j: f64,
    alpha_j: f64,
    vhat: &[f64],
    lambda: f64,
    n: usize,
) -> f64 {
    let inv = 1.0 / (lambda * n as f64);
    let dot: f64 = a_j.iter().zip(vhat).map(|(a, v)| a * v).sum();
    let delta = (y_j - inv * dot) / (inv * norm_sq_j);
    y_j * (y_j * (alpha_j + delta)).clamp(0.0, 1.0)
}

fn sweep_rng(seed: u64, sweep: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(sweep as u64 + 1)))
}

struct LocalRun {
    alpha: Vec<f64>,
    shadow: Vec<f64>,
}

impl LocalRun {
    fn start(view: &LocalBlockView) -> Self {
        LocalRun {
            alpha: view.alpha_snapshot.clone(),
            shadow: view.shadow0.clone(),
        }
    }

    fn sweep(&mut self, p: &ProblemSpec, view: &LocalBlockView, seed: u64, sweep: usize) {
        let m = view.m();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut sweep_rng(seed, sweep));
        for &j in &order {
            let old = self.alpha[j];
            let new = if view.norms_sq[j] == 0.0 {
                // Zero column: the data term is flat, pin at the g_j minimizer.
                match p.family {
                    Family::Ridge | Family::ElasticNet => 0.0,
                    Family::SvmDual => view.y[j],
                }
            } else {
                match p.family {
                    Family::Ridge | Family::ElasticNet => coord_update_elasticnet(
                        view.col(j),
                        view.norms_sq[j],
                        old,
                        &self.shadow,
                        p.lambda,
                        p.eta,
                        view.d,
                    ),
                    Family::SvmDual => coord_update_svm(
                        view.col(j),
                        view.norms_sq[j],
                        view.y[j],
                        old,
                        &self.shadow,
                        p.lambda,
                        view.n,
                    ),
                }
            };
            if new != old {
                let diff = new - old;
                for (s, a) in self.shadow.iter_mut().zip(view.col(j)) {
                    *s += diff * a;
                }
                self.alpha[j] = new;
            }
        }
    }

    /// Objective restricted to the block (global constants dropped).
    fn local_objective(&self, p: &ProblemSpec, view: &LocalBlockView) -> f64 {
        match p.family {
            Family::Ridge | Family::ElasticNet => {
                let fit: f64 =
                    self.shadow.iter().map(|s| s * s).sum::<f64>() / (2.0 * view.d as f64);
                let reg: f64 = self
                    .alpha
                    .iter()
                    .map(|a| p.lambda * (p.eta / 2.0 * a * a + (1.0 - p.eta) * a.abs()))
                    .sum();
                fit + reg
            }
            Family::SvmDual => {
                let n = view.n as f64;
                let quad: f64 =
                    self.shadow.iter().map(|s| s * s).sum::<f64>() / (2.0 * p.lambda * n * n);
                let lin: f64 = self
                    .alpha
                    .iter()
                    .zip(&view.y)
                    .map(|(a, y)| -y * a)
                    .sum::<f64>()
                    / n;
                quad + lin
            }
        }
    }

    fn delta(&self, view: &LocalBlockView) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&view.alpha_snapshot)
            .map(|(a, a0)| a - a0)
            .collect()
    }
}

/// Run the budgeted randomized sweeps and return the block update
/// delta = alpha_local - alpha_snapshot.
pub fn solve_block(p: &ProblemSpec, view: &LocalBlockView, budget: &SolverBudget) -> Vec<f64> {
    let mut run = LocalRun::start(view);
    for sweep in 0..budget.passes {
        run.sweep(p, view, budget.seed, sweep);
    }
    run.delta(view)
}

const EXACT_SWEEP_CAP: usize = 100_000;

/// The theta = 1 reference update. Quadratic-plus-L2 blocks are solved in
/// closed form; the L1 and SVM families escalate sweeps until the
/// successive-sweep objective decrease falls below 1e-14.
pub fn exact_block_solve(p: &ProblemSpec, view: &LocalBlockView) -> Result<Vec<f64>> {
    if view.m() > 8 {
        return Err(Error::Config(
            "exact_block_solve is limited to blocks of size <= 8".into(),
        ));
    }
    let closed_form = matches!(p.family, Family::Ridge) || (p.family == Family::ElasticNet && p.eta == 1.0);
    if closed_form {
        // (G + lambda d I) delta = -A_P^T vtilde0 - lambda d alpha0
        let m = view.m();
        let ld = p.lambda * view.d as f64;
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for j in 0..m {
            let cj = view.col(j);
            for k in j..m {
                let g: f64 = cj.iter().zip(view.col(k)).map(|(a, b)| a * b).sum();
                gram[j * m + k] = g;
                gram[k * m + j] = g;
            }
            gram[j * m + j] += ld;
            let dot: f64 = cj.iter().zip(&view.shadow0).map(|(a, v)| a * v).sum();
            rhs[j] = -dot - ld * view.alpha_snapshot[j];
        }
        return solve_dense_system(&mut gram, &mut rhs);
    }

    let mut run = LocalRun::start(view);
    let mut prev = run.local_objective(p, view);
    for sweep in 0..EXACT_SWEEP_CAP {
        run.sweep(p, view, 0x5eed_b10c, sweep);
        let cur = run.local_objective(p, view);
        if prev - cur < 1e-14 {
            break;
        }
        prev = cur;
    }
    Ok(run.delta(view))
}

/// Measured approximation quality of the budgeted solve relative to the
/// exact block minimizer, clamped to [0, 1].
pub fn measure_theta(p: &ProblemSpec, view: &LocalBlockView, budget: &SolverBudget) -> Result<f64> {
    let start = LocalRun::start(view).local_objective(p, view);

    let mut budgeted = LocalRun::start(view);
    for sweep in 0..budget.passes {
        budgeted.sweep(p, view, budget.seed, sweep);
    }
    let o_budget = budgeted.local_objective(p, view);

    let exact_delta = exact_block_solve(p, view)?;
    let mut exact = LocalRun::start(view);
    for (j, &dj) in exact_delta.iter().enumerate() {
        if dj != 0.0 {
            exact.alpha[j] += dj;
            for (s, a) in exact.shadow.iter_mut().zip(view.col(j)) {
                *s += dj * a;
            }
        }
    }
    let o_exact = exact.local_objective(p, view);

    let denom = start - o_exact;
    if denom < 1e-14 {
        return Ok(1.0);
    }
    Ok(((start - o_budget) / denom).clamp(0.0, 1.0))
}

/// In-place Gaussian elimination with partial pivoting; `a` is row-major
/// square, consumed along with `b`.
pub fn solve_dense_system(a: &mut [f64], b: &mut [f64]) -> Result<Vec<f64>> {
    let m = b.len();
    debug_assert_eq!(a.len(), m * m);
    for col in 0..m {
        let (pivot_row, pivot_abs) = (col..m)
            .map(|r| (r, a[r * m + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot_abs < 1e-300 {
            return Err(Error::Internal("singular block system".into()));
        }
        if pivot_row != col {
            for k in 0..m {
                a.swap(pivot_row * m + k, col * m + k);
            }
            b.swap(pivot_row, col);
        }
        let pivot = a[col * m + col];
        for r in (col + 1)..m {
            let factor = a[r * m + col] / pivot;
            if factor != 0.0 {
                for k in col..m {
                    a[r * m + k] -= factor * a[col * m + k];
                }
                b[r] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let mut acc = b[r];
        for k in (r + 1)..m {
            acc -= a[r * m + k] * x[k];
        }
        x[r] = acc / a[r * m + r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, DatasetDense, LabelKind, SyntheticSpec};
    use crate::problem::fixtures::ridge_identity;
    use crate::problem::objective;

    #[test]
    fn elasticnet_update_soft_threshold_cases() {
        let a = [1.0, 0.0];
        let vtilde = [-1.0, 0.0];
        // lambda=0.25, d=2, eta=0: tau=0.5, gamma=1 -> 0.5
        let new = coord_update_elasticnet(&a, 1.0, 0.0, &vtilde, 0.25, 0.0, 2);
        assert!((new - 0.5).abs() < 1e-15);
        // lambda=0.5: tau=1, gamma=1 -> exactly at the threshold
        let new = coord_update_elasticnet(&a, 1.0, 0.0, &vtilde, 0.5, 0.0, 2);
        assert_eq!(new, 0.0);
        // eta=1 pure ridge on the A=I fixture: gamma = 1/3
        let new = coord_update_elasticnet(&a, 1.0, 0.0, &vtilde, 1.0, 1.0, 2);
        assert!((new - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ridge_update_matches_1d_closed_form() {
        // min over x of (1/2d)||x a + vtilde||^2 + (lambda/2) x^2 has the
        // analytic solution -a^T vtilde / (||a||^2 + lambda d).
        let a = [2.0, -1.0, 0.5];
        let vtilde = [0.3, 0.8, -1.2];
        let (lambda, d) = (0.7, 3usize);
        let norm_sq: f64 = a.iter().map(|x| x * x).sum();
        let dot: f64 = a.iter().zip(&vtilde).map(|(x, v)| x * v).sum();
        let analytic = -dot / (norm_sq + lambda * d as f64);
        let new = coord_update_elasticnet(&a, norm_sq, 0.0, &vtilde, lambda, 1.0, d);
        assert!((new - analytic).abs() < 1e-14);
    }

    #[test]
    fn svm_update_cases() {
        let a = [1.0];
        // y=+1, norm 1, lambda=1, n=1, alpha=0, vhat=0 -> alpha=1
        let new = coord_update_svm(&a, 1.0, 1.0, 0.0, &[0.0], 1.0, 1);
        assert_eq!(new, 1.0);
        // Sign symmetry.
        let new = coord_update_svm(&a, 1.0, -1.0, 0.0, &[0.0], 1.0, 1);
        assert_eq!(new, -1.0);
        // Fixed point: already-optimal coordinate is unchanged.
        let new = coord_update_svm(&a, 1.0, 1.0, 1.0, &[1.0], 1.0, 1);
        assert_eq!(new, 1.0);
    }

    fn en_instance(seed: u64, eta: f64, lambda: f64) -> (DatasetDense, ProblemSpec, TrainState) {
        let data = gen_synthetic(&SyntheticSpec {
            d: 6,
            n: 4,
            density: 1.0,
            noise_std: 0.1,
            column_scale_spread: 1.0,
            seed,
            labels: LabelKind::Regression,
        })
        .unwrap();
        let p = ProblemSpec::new(Family::ElasticNet, lambda, eta, &data).unwrap();
        let state = TrainState::zero(&data);
        (data, p, state)
    }

    #[test]
    fn many_passes_match_exact_on_ridge_block() {
        let data = gen_synthetic(&SyntheticSpec {
            d: 5,
            n: 3,
            density: 1.0,
            noise_std: 0.2,
            column_scale_spread: 0.5,
            seed: 4,
            labels: LabelKind::Regression,
        })
        .unwrap();
        let p = ProblemSpec::new(Family::Ridge, 0.3, 1.0, &data).unwrap();
        let state = TrainState::zero(&data);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 2]).unwrap();
        let budget = SolverBudget::new(200, 1).unwrap();
        let approx = solve_block(&p, &view, &budget);
        let exact = exact_block_solve(&p, &view).unwrap();
        for (a, e) in approx.iter().zip(&exact) {
            assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }
    }

    #[test]
    fn one_pass_on_single_coordinate_is_exact() {
        let (data, p, state) = en_instance(8, 0.0, 0.2);
        let view = LocalBlockView::new(&p, &data, &state, &[1]).unwrap();
        let budget = SolverBudget::new(1, 9).unwrap();
        let delta = solve_block(&p, &view, &budget);
        let direct = coord_update_elasticnet(
            data.col(1),
            data.col(1).iter().map(|a| a * a).sum(),
            0.0,
            &view.shadow0,
            p.lambda,
            p.eta,
            data.n_features(),
        );
        assert!((delta[0] - direct).abs() < 1e-15);
        let theta = measure_theta(&p, &view, &budget).unwrap();
        assert!((theta - 1.0).abs() < 1e-10);
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..5u64 {
            let (data, p, state) = en_instance(seed, 0.0, 0.15);
            let view = LocalBlockView::new(&p, &data, &state, &[0, 1, 3]).unwrap();
            let budget = SolverBudget::new(1 + seed as usize, seed).unwrap();
            let delta = solve_block(&p, &view, &budget);
            let before = objective(&p, &data, &state);
            let mut after_state = state.clone();
            after_state.apply_delta(&data, &view.block, &delta);
            let after = objective(&p, &data, &after_state);
            assert!(after <= before + 1e-12, "{after} > {before}");
        }
    }

    #[test]
    fn local_shadow_stays_consistent() {
        let (data, p, state) = en_instance(3, 0.5, 0.2);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1, 2, 3]).unwrap();
        let mut run = LocalRun::start(&view);
        for sweep in 0..7 {
            run.sweep(&p, &view, 123, sweep);
        }
        // Recompute the shadow from scratch.
        let mut fresh = view.shadow0.clone();
        for j in 0..view.m() {
            let diff = run.alpha[j] - view.alpha_snapshot[j];
            for (s, a) in fresh.iter_mut().zip(view.col(j)) {
                *s += diff * a;
            }
        }
        for (a, b) in run.shadow.iter().zip(&fresh) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_solve_on_ridge_fixture() {
        let (data, p) = ridge_identity();
        let state = TrainState::zero(&data);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1]).unwrap();
        let delta = exact_block_solve(&p, &view).unwrap();
        assert!((delta[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((delta[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_solve_at_optimum_is_zero() {
        let (data, p) = ridge_identity();
        let mut state = TrainState::zero(&data);
        state.alpha = vec![1.0 / 3.0, 1.0 / 3.0];
        state.resync(&data);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1]).unwrap();
        let delta = exact_block_solve(&p, &view).unwrap();
        assert!(delta.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn theta_strictly_between_zero_and_one_on_correlated_block() {
        // Two columns with Gram off-diagonal 0.9.
        let data = DatasetDense::new(
            2,
            2,
            vec![1.0, 0.0, 0.9, (1.0f64 - 0.81).sqrt()],
            vec![1.0, -2.0],
            LabelKind::Regression,
        )
        .unwrap();
        let p = ProblemSpec::new(Family::Ridge, 0.05, 1.0, &data).unwrap();
        let state = TrainState::zero(&data);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1]).unwrap();
        let theta = measure_theta(&p, &view, &SolverBudget::new(1, 7).unwrap()).unwrap();
        assert!(theta > 0.0 && theta < 1.0, "theta = {theta}");
    }

    #[test]
    fn theta_is_one_for_orthogonal_block() {
        let data = DatasetDense::new(
            2,
            2,
            vec![2.0, 0.0, 0.0, 3.0],
            vec![1.0, -2.0],
            LabelKind::Regression,
        )
        .unwrap();
        let p = ProblemSpec::new(Family::Ridge, 0.1, 1.0, &data).unwrap();
        let state = TrainState::zero(&data);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1]).unwrap();
        let theta = measure_theta(&p, &view, &SolverBudget::new(1, 7).unwrap()).unwrap();
        assert!((theta - 1.0).abs() < 1e-10);
    }

    #[test]
    fn theta_monotone_in_passes() {
        let (data, p, state) = en_instance(17, 0.0, 0.1);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1, 2, 3]).unwrap();
        let mut prev = 0.0;
        for passes in 1..8 {
            let theta = measure_theta(&p, &view, &SolverBudget::new(passes, 42).unwrap()).unwrap();
            assert!(theta >= prev - 1e-10, "passes={passes}: {theta} < {prev}");
            prev = theta;
        }
    }

    #[test]
    fn svm_feasible_after_every_update() {
        let data = gen_synthetic(&SyntheticSpec {
            d: 4,
            n: 6,
            density: 1.0,
            noise_std: 0.0,
            column_scale_spread: 0.5,
            seed: 5,
            labels: LabelKind::Classification,
        })
        .unwrap();
        let p = ProblemSpec::new(Family::SvmDual, 0.5, 0.0, &data).unwrap();
        let state = TrainState::zero(&data);
        let view = LocalBlockView::new(&p, &data, &state, &[0, 1, 2, 3, 4, 5]).unwrap();
        let mut run = LocalRun::start(&view);
        for sweep in 0..5 {
            run.sweep(&p, &view, 11, sweep);
            for (a, y) in run.alpha.iter().zip(&view.y) {
                let prod = y * a;
                assert!((0.0..=1.0).contains(&prod), "y*alpha = {prod}");
            }
        }
    }
}
