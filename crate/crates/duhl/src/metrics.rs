//! Reference optima, suboptimality, per-step and rate bound checkers, and
//! CSV trace emission.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use crate::data::{column_norms_sq, DatasetDense};
use crate::engine::{RoundTrace, RunResult};
use crate::error::{Error, Result};
use crate::local::{coord_update_elasticnet, coord_update_svm};
use crate::problem::{objective, total_gap, Family, ProblemSpec, TrainState};

/// Central record of every numeric guard used by the checkers.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Gap certificate for the reference optimum.
    pub reference_gap: f64,
    /// Epoch cap for the reference solve.
    pub reference_epoch_cap: usize,
    /// Relaxed certificate accepted at the cap before erroring.
    pub reference_gap_relaxed: f64,
    /// Slack in the per-step improvement check.
    pub lemma1_slack: f64,
    /// Relative slack in the linear-rate envelope check.
    pub rate_rel: f64,
    /// Allowed negative suboptimality (certificate error).
    pub subopt_floor: f64,
    /// Slack in the gap-dominance check.
    pub dominance_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            reference_gap: 1e-12,
            reference_epoch_cap: 1_000_000,
            reference_gap_relaxed: 1e-10,
            lemma1_slack: 1e-10,
            rate_rel: 1e-9,
            subopt_floor: -1e-10,
            dominance_slack: 1e-9,
        }
    }
}

/// Objective value at a numerically exact optimum, certified by driving the
/// duality gap below the configured tolerance with cyclic exact coordinate
/// descent.
pub fn reference_optimum(p: &ProblemSpec, data: &DatasetDense) -> Result<f64> {
    reference_optimum_with(p, data, &Tolerances::default())
}

pub fn reference_optimum_with(
    p: &ProblemSpec,
    data: &DatasetDense,
    tol: &Tolerances,
) -> Result<f64> {
    let n = data.n_cols();
    let d = data.n_features();
    let norms = column_norms_sq(data);
    let mut state = TrainState::zero(data);
    // Family-appropriate shadow vector, maintained incrementally.
    let mut shadow: Vec<f64> = match p.family {
        Family::Ridge | Family::ElasticNet => data.labels().iter().map(|b| -b).collect(),
        Family::SvmDual => vec![0.0; d],
    };

    let mut gap = total_gap(p, data, &state)?;
    let mut epoch = 0;
    while gap > tol.reference_gap && epoch < tol.reference_epoch_cap {
        for (i, &nrm) in norms.iter().enumerate() {
            if nrm == 0.0 {
                continue;
            }
            let old = state.alpha[i];
            let new = match p.family {
                Family::Ridge | Family::ElasticNet => coord_update_elasticnet(
                    data.col(i),
                    nrm,
                    old,
                    &shadow,
                    p.lambda,
                    p.eta,
                    d,
                ),
                Family::SvmDual => coord_update_svm(
                    data.col(i),
                    nrm,
                    data.labels()[i],
                    old,
                    &shadow,
                    p.lambda,
                    n,
                ),
            };
            if new != old {
                let diff = new - old;
                state.alpha[i] = new;
                for (s, a) in shadow.iter_mut().zip(data.col(i)) {
                    *s += diff * a;
                }
            }
        }
        epoch += 1;
        state.resync(data);
        gap = total_gap(p, data, &state)?;
    }
    if gap > tol.reference_gap_relaxed {
        return Err(Error::Convergence(format!(
            "reference solve stalled: gap {gap:.3e} after {epoch} epochs"
        )));
    }
    Ok(objective(p, data, &state))
}

/// Cache of reference optima keyed by a content hash of (problem, dataset).
#[derive(Default)]
pub struct OptimumCache {
    map: HashMap<u64, f64>,
}

impl OptimumCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, p: &ProblemSpec, data: &DatasetDense) -> Result<f64> {
        let key = content_hash(p, data);
        if let Some(&v) = self.map.get(&key) {
            return Ok(v);
        }
        let v = reference_optimum(p, data)?;
        self.map.insert(key, v);
        Ok(v)
    }
}

fn content_hash(p: &ProblemSpec, data: &DatasetDense) -> u64 {
    let mut h = DefaultHasher::new();
    (p.family as u8).hash(&mut h);
    p.lambda.to_bits().hash(&mut h);
    p.eta.to_bits().hash(&mut h);
    data.n_features().hash(&mut h);
    data.n_cols().hash(&mut h);
    for i in 0..data.n_cols() {
        for v in data.col(i) {
            v.to_bits().hash(&mut h);
        }
    }
    for v in data.labels() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Fill in the suboptimality column of a finished run.
pub fn attach_suboptimality(result: &mut RunResult, optimum: f64) {
    for r in &mut result.rounds {
        r.suboptimality = Some(r.objective - optimum);
    }
}

/// One per-round row of a bound report.
#[derive(Debug, Clone)]
pub struct BoundRow {
    pub round: usize,
    pub measured: f64,
    pub required: f64,
    pub s: f64,
    pub sigma: f64,
    pub satisfied: bool,
}

/// Per-step improvement check for strongly convex regularizers: with
/// s = mu / (sigma L + mu) the improvement must be at least
/// theta * s * (sum of fresh gaps over the selected block).
pub fn check_lemma1_step(
    trace: &RoundTrace,
    p: &ProblemSpec,
    sigma: f64,
    tol: &Tolerances,
) -> Result<BoundRow> {
    if p.strong_convexity <= 0.0 {
        return Err(Error::Config(
            "per-step check requires a strongly convex regularizer".into(),
        ));
    }
    let s = p.strong_convexity / (sigma * p.smoothness + p.strong_convexity);
    let theta = trace.theta_hat.unwrap_or(1.0);
    let measured = trace.pre_objective - trace.objective;
    let required = theta * s * trace.block_gap_sum;
    let satisfied = measured >= required - tol.lemma1_slack * (1.0 + required.abs());
    Ok(BoundRow {
        round: trace.round,
        measured,
        required,
        s,
        sigma,
        satisfied,
    })
}

#[derive(Debug, Clone)]
pub struct RateRow {
    pub round: usize,
    pub suboptimality: f64,
    pub envelope: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub all_satisfied: bool,
}

/// Linear-rate envelope check: suboptimality after round t must satisfy
/// eps_t <= (1 - eta_hat (m/n) mu/(sigma L + mu))^(t+1) eps_0.
#[allow(clippy::too_many_arguments)]
pub fn check_theorem1_rate(
    result: &RunResult,
    p: &ProblemSpec,
    n: usize,
    m: usize,
    sigma: f64,
    eta_hat: f64,
    optimum: f64,
    tol: &Tolerances,
) -> Result<RateReport> {
    if p.strong_convexity <= 0.0 {
        return Err(Error::Config(
            "linear-rate check requires a strongly convex regularizer".into(),
        ));
    }
    let eps0 = result.initial_objective - optimum;
    let contraction =
        1.0 - eta_hat * (m as f64 / n as f64) * p.strong_convexity
            / (sigma * p.smoothness + p.strong_convexity);
    let mut rows = Vec::with_capacity(result.rounds.len());
    let mut all = true;
    for (t, r) in result.rounds.iter().enumerate() {
        let eps = r
            .suboptimality
            .ok_or_else(|| Error::Config("suboptimality not attached".into()))?;
        let envelope = contraction.powi(t as i32 + 1) * eps0;
        let satisfied = eps <= envelope * (1.0 + tol.rate_rel) + 1e-15;
        all &= satisfied;
        rows.push(RateRow {
            round: r.round,
            suboptimality: eps,
            envelope,
            satisfied,
        });
    }
    Ok(RateReport {
        rows,
        all_satisfied: all,
    })
}

/// Sublinear envelope for bounded-support regularizers:
/// (1/(eta_hat m)) * 2 gamma n^2 / (2n + t - t0) with gamma = 2 L B^2 sigma.
#[allow(clippy::too_many_arguments)]
pub fn theorem2_envelope(
    t: f64,
    n: usize,
    m: usize,
    eta_hat: f64,
    smoothness: f64,
    support_bound: f64,
    sigma: f64,
    eps0: f64,
) -> f64 {
    let n_f = n as f64;
    let m_f = m as f64;
    let gamma = 2.0 * smoothness * support_bound * support_bound * sigma;
    let t0 = (n_f / m_f * (2.0 * eta_hat * m_f * eps0 / (n_f * gamma)).ln()).max(0.0);
    (1.0 / (eta_hat * m_f)) * 2.0 * gamma * n_f * n_f / (2.0 * n_f + t - t0)
}

/// Largest block operator norm over the blocks a run actually selected.
pub fn max_block_sigma(data: &DatasetDense, result: &RunResult) -> Result<f64> {
    let mut sigma = 0.0f64;
    let mut seen: Vec<&[usize]> = Vec::new();
    for r in &result.rounds {
        if seen.contains(&r.block.as_slice()) {
            continue;
        }
        sigma = sigma.max(crate::data::block_op_norm_sq(data, &r.block)?);
        seen.push(&r.block);
    }
    Ok(sigma)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the per-round trace with the fixed header. Deterministic byte
/// output for deterministic runs; floats carry 17 significant digits.
pub fn write_csv(result: &RunResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    writeln!(
        out,
        "round,epochs,objective,gap,suboptimality,rho,swaps,gap_updates"
    )
    .map_err(io_err)?;
    for r in &result.rounds {
        let sub = r.suboptimality.map(fmt17).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            fmt17(r.epochs),
            fmt17(r.objective),
            fmt17(r.total_gap),
            sub,
            fmt17(r.rho),
            r.swaps,
            r.gap_updates
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// One round of the speedup-vs-rho comparison: the improvement achieved by
/// the gap-selected block and by random blocks solved from the same iterate.
#[derive(Debug, Clone, Copy)]
pub struct SpeedupSample {
    pub round: usize,
    /// Gap-block improvement over the mean random-block improvement.
    pub measured: f64,
    /// Informativeness ratio of the gap block over the sampled random mean.
    pub predicted: f64,
}

/// Follow a gap-selection trajectory; at every round, additionally solve
/// random blocks from the same round-start iterate with the same budget and
/// record measured versus rho-predicted speedup over random selection.
#[allow(clippy::too_many_arguments)]
pub fn speedup_rho_samples(
    p: &ProblemSpec,
    data: &DatasetDense,
    m: usize,
    passes: usize,
    max_rounds: usize,
    n_random: usize,
    seed: u64,
) -> Result<Vec<SpeedupSample>> {
    use crate::local::{solve_block, LocalBlockView};
    use crate::problem::dual_map_w;
    use crate::select::{rho, select_random, select_topm};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainState::zero(data);
    let mut samples = Vec::new();
    for t in 0..max_rounds {
        let w = dual_map_w(p, data, &state);
        let gaps: Vec<f64> = (0..data.n_cols())
            .map(|i| crate::problem::coord_gap(p, data, i, &state, &w))
            .collect::<Result<_>>()?;
        if gaps.iter().sum::<f64>() <= 1e-12 {
            break;
        }
        let pre = objective(p, data, &state);
        let improvement = |block: &[usize], budget_seed: u64| -> Result<(f64, Vec<f64>)> {
            let view = LocalBlockView::new(p, data, &state, block)?;
            let budget = crate::local::SolverBudget {
                passes,
                seed: budget_seed,
            };
            let delta = solve_block(p, &view, &budget);
            let mut probe = state.clone();
            probe.apply_delta(data, block, &delta);
            Ok((pre - objective(p, data, &probe), delta))
        };

        let block = select_topm(&gaps, m);
        let (gap_gain, delta) = improvement(&block, seed ^ t as u64)?;

        let mut rand_gain = 0.0;
        let mut rand_rho = 0.0;
        for k in 0..n_random {
            let rand_block = select_random(data.n_cols(), m, &mut rng);
            let (gain, _) = improvement(&rand_block, seed ^ t as u64 ^ (k as u64) << 32)?;
            rand_gain += gain;
            rand_rho += rho(&rand_block, &gaps);
        }
        rand_gain /= n_random as f64;
        rand_rho /= n_random as f64;
        if rand_gain > 1e-14 && rand_rho > 1e-14 {
            samples.push(SpeedupSample {
                round: t,
                measured: gap_gain / rand_gain,
                predicted: rho(&block, &gaps) / rand_rho,
            });
        }
        state.apply_delta(data, &block, &delta);
    }
    if samples.is_empty() {
        return Err(Error::Numeric("no comparable rounds".into()));
    }
    Ok(samples)
}
