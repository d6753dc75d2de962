//! GLM objective families, primal-dual mapping and per-coordinate duality gaps.

use crate::data::{DatasetDense, LabelKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Ridge,
    ElasticNet,
    SvmDual,
}

/// One problem instance: family, regularization, and the derived constants
/// used by the convergence bound checkers.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub family: Family,
    pub lambda: f64,
    /// Elastic-net trade-off in [0, 1]; 1 = pure L2, 0 = pure Lasso.
    /// Ignored by the other families.
    pub eta: f64,
    /// Smoothness of the data-fit term f.
    pub smoothness: f64,
    /// Strong convexity of each g_i (0 for Lasso and the dual SVM).
    pub strong_convexity: f64,
    /// Bounded-support radius for the non-strongly-convex families.
    pub support_bound: Option<f64>,
}

impl ProblemSpec {
    pub fn new(family: Family, lambda: f64, eta: f64, data: &DatasetDense) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config("eta must lie in [0, 1]".into()));
        }
        let d = data.n_features();
        let n = data.n_cols();
        match family {
            Family::Ridge | Family::ElasticNet => {
                if data.labels().len() != d {
                    return Err(Error::Config(
                        "regression families need one label per row (transpose first?)".into(),
                    ));
                }
            }
            Family::SvmDual => {
                if data.kind() != LabelKind::Classification || data.labels().len() != n {
                    return Err(Error::Config(
                        "dual SVM needs +-1 labels, one per column".into(),
                    ));
                }
            }
        }
        let spec = match family {
            Family::Ridge => ProblemSpec {
                family,
                lambda,
                eta: 1.0,
                smoothness: 1.0 / d as f64,
                strong_convexity: lambda,
                support_bound: None,
            },
            Family::ElasticNet => {
                let support_bound = if eta == 0.0 {
                    Some(lasso_support_bound(data, lambda)?)
                } else {
                    None
                };
                ProblemSpec {
                    family,
                    lambda,
                    eta,
                    smoothness: 1.0 / d as f64,
                    strong_convexity: lambda * eta,
                    support_bound,
                }
            }
            Family::SvmDual => ProblemSpec {
                family,
                lambda,
                eta: 0.0,
                smoothness: 1.0 / (lambda * (n as f64) * (n as f64)),
                strong_convexity: 0.0,
                support_bound: Some(1.0),
            },
        };
        Ok(spec)
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.family, Family::Ridge | Family::ElasticNet)
    }
}

/// Bounded-support radius for the pure Lasso: ||b||^2 / (2 lambda d).
/// A zero label vector yields B = 0, which pins every iterate at zero.
pub fn lasso_support_bound(data: &DatasetDense, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::Config("lambda must be positive".into()));
    }
    let b2: f64 = data.labels().iter().map(|v| v * v).sum();
    Ok(b2 / (2.0 * lambda * data.n_features() as f64))
}

/// The iterate together with the shared vector v = A * alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
    pub round: usize,
}

impl TrainState {
    pub fn zero(data: &DatasetDense) -> Self {
        TrainState {
            alpha: vec![0.0; data.n_cols()],
            v: vec![0.0; data.n_features()],
            round: 0,
        }
    }

    /// Apply a block update and maintain v incrementally.
    pub fn apply_delta(&mut self, data: &DatasetDense, block: &[usize], delta: &[f64]) {
        debug_assert_eq!(block.len(), delta.len());
        for (&i, &di) in block.iter().zip(delta) {
            if di != 0.0 {
                self.alpha[i] += di;
                data.axpy_col(i, di, &mut self.v);
            }
        }
    }

    /// Recompute v = A * alpha from scratch.
    pub fn resync(&mut self, data: &DatasetDense) {
        self.v.iter_mut().for_each(|x| *x = 0.0);
        for (i, &ai) in self.alpha.iter().enumerate() {
            if ai != 0.0 {
                data.axpy_col(i, ai, &mut self.v);
            }
        }
    }

    /// Max drift between the cached v and a fresh A * alpha.
    pub fn v_drift(&self, data: &DatasetDense) -> f64 {
        let mut fresh = self.clone();
        fresh.resync(data);
        self.v
            .iter()
            .zip(&fresh.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// O(alpha) = f(A alpha) + g(alpha) for the configured family.
pub fn objective(p: &ProblemSpec, data: &DatasetDense, state: &TrainState) -> f64 {
    let d = data.n_features() as f64;
    let n = data.n_cols() as f64;
    match p.family {
        Family::Ridge | Family::ElasticNet => {
            let b = data.labels();
            let fit: f64 = state
                .v
                .iter()
                .zip(b)
                .map(|(vi, bi)| (vi - bi) * (vi - bi))
                .sum::<f64>()
                / (2.0 * d);
            let l2: f64 = state.alpha.iter().map(|a| a * a).sum();
            let l1: f64 = state.alpha.iter().map(|a| a.abs()).sum();
            let reg = match p.family {
                Family::Ridge => p.lambda / 2.0 * l2,
                Family::ElasticNet => p.lambda * (p.eta / 2.0 * l2 + (1.0 - p.eta) * l1),
                Family::SvmDual => unreachable!(),
            };
            fit + reg
        }
        Family::SvmDual => {
            let y = data.labels();
            let lin: f64 = state
                .alpha
                .iter()
                .zip(y)
                .map(|(ai, yi)| -yi * ai)
                .sum::<f64>()
                / n;
            let quad: f64 =
                state.v.iter().map(|vi| vi * vi).sum::<f64>() / (2.0 * p.lambda * n * n);
            lin + quad
        }
    }
}

/// The dual vector in the convention of the per-family gap formulas:
/// w = v - b for the regression families, w = v / (lambda n) for the SVM.
pub fn dual_map_w(p: &ProblemSpec, data: &DatasetDense, state: &TrainState) -> Vec<f64> {
    match p.family {
        Family::Ridge | Family::ElasticNet => state
            .v
            .iter()
            .zip(data.labels())
            .map(|(vi, bi)| vi - bi)
            .collect(),
        Family::SvmDual => {
            let scale = 1.0 / (p.lambda * data.n_cols() as f64);
            state.v.iter().map(|vi| vi * scale).collect()
        }
    }
}

const GAP_CLAMP: f64 = -1e-12;

fn clamp_gap(raw: f64, i: usize) -> Result<f64> {
    if raw < GAP_CLAMP {
        return Err(Error::Internal(format!(
            "negative coordinate gap {raw:.3e} at coordinate {i} (stale dual vector?)"
        )));
    }
    Ok(raw.max(0.0))
}

/// Per-coordinate duality gap given a dual vector consistent with the state.
pub fn coord_gap(
    p: &ProblemSpec,
    data: &DatasetDense,
    i: usize,
    state: &TrainState,
    w: &[f64],
) -> Result<f64> {
    coord_gap_at(p, data, i, state.alpha[i], w)
}

/// Same as `coord_gap` but with an explicit alpha_i, for evaluating gaps at
/// a snapshot iterate.
pub fn coord_gap_at(
    p: &ProblemSpec,
    data: &DatasetDense,
    i: usize,
    alpha_i: f64,
    w: &[f64],
) -> Result<f64> {
    let t = data.col_dot(i, w);
    let d = data.n_features() as f64;
    let raw = match p.family {
        Family::Ridge => {
            let ld = p.lambda * d;
            (alpha_i * t + t * t / (2.0 * ld) + ld / 2.0 * alpha_i * alpha_i) / d
        }
        Family::ElasticNet => {
            let ld = p.lambda * d;
            if p.eta == 0.0 {
                let b = p.support_bound.expect("Lasso support bound");
                (alpha_i * t + b * (t.abs() - ld).max(0.0) + ld * alpha_i.abs()) / d
            } else {
                // Strongly convex conjugate of g_i(x) = lambda(eta/2 x^2 + (1-eta)|x|).
                let conj =
                    (t.abs() / d - p.lambda * (1.0 - p.eta)).max(0.0).powi(2) / (2.0 * p.lambda * p.eta);
                let reg = p.lambda * (p.eta / 2.0 * alpha_i * alpha_i + (1.0 - p.eta) * alpha_i.abs());
                alpha_i * t / d + reg + conj
            }
        }
        Family::SvmDual => {
            let yi = data.labels()[i];
            (alpha_i * t + (1.0 - yi * t).max(0.0) - yi * alpha_i) / data.n_cols() as f64
        }
    };
    clamp_gap(raw, i)
}

/// All n coordinate gaps with one shared dual-vector evaluation.
pub fn all_gaps(p: &ProblemSpec, data: &DatasetDense, state: &TrainState) -> Result<Vec<f64>> {
    let w = dual_map_w(p, data, state);
    (0..data.n_cols())
        .map(|i| coord_gap(p, data, i, state, &w))
        .collect()
}

/// Total duality gap.
pub fn total_gap(p: &ProblemSpec, data: &DatasetDense, state: &TrainState) -> Result<f64> {
    Ok(all_gaps(p, data, state)?.iter().sum())
}

/// Dual SVM feasibility: y_i alpha_i in [0, 1] for every coordinate.
pub fn svm_feasible(data: &DatasetDense, alpha: &[f64]) -> bool {
    alpha
        .iter()
        .zip(data.labels())
        .all(|(&ai, &yi)| (-1e-12..=1.0 + 1e-12).contains(&(yi * ai)))
}
