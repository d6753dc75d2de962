//! Block selection policies and the per-round informativeness ratio.

use rand::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    GapOracle,
    GapMemory,
    UniformRandom,
    SequentialBlocks,
    ImportanceSampling,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gap-oracle" => Ok(PolicyKind::GapOracle),
            "gap-memory" => Ok(PolicyKind::GapMemory),
            "random" => Ok(PolicyKind::UniformRandom),
            "sequential" => Ok(PolicyKind::SequentialBlocks),
            "importance" => Ok(PolicyKind::ImportanceSampling),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::GapOracle => "gap-oracle",
            PolicyKind::GapMemory => "gap-memory",
            PolicyKind::UniformRandom => "random",
            PolicyKind::SequentialBlocks => "sequential",
            PolicyKind::ImportanceSampling => "importance",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    /// Block size, fixed for a run.
    pub m: usize,
}

/// Indices of the m largest scores, ties broken toward the lower index.
/// The result is sorted ascending.
pub fn select_topm(scores: &[f64], m: usize) -> Vec<usize> {
    let m = m.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = idx[..m].to_vec();
    top.sort_unstable();
    top
}

/// Uniform sample of m indices without replacement, sorted ascending.
pub fn select_random(n: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, m.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

/// Contiguous block k = round mod ceil(n/m); the final block may be short.
pub fn select_sequential(n: usize, m: usize, round: usize) -> Vec<usize> {
    let n_blocks = n.div_ceil(m);
    let k = round % n_blocks;
    (k * m..((k + 1) * m).min(n)).collect()
}

/// m draws without replacement with probability proportional to the squared
/// column norms among the remaining indices. Falls back to uniform when all
/// norms are zero.
pub fn select_importance(norms_sq: &[f64], m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = norms_sq.len();
    let m = m.min(n);
    if norms_sq.iter().all(|&w| w == 0.0) {
        return select_random(n, m, rng);
    }
    let mut weights = norms_sq.to_vec();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // Remaining mass exhausted; fill uniformly from what is left.
            let mut rest: Vec<usize> = (0..n).filter(|&i| !picked.contains(&i)).collect();
            rest.shuffle(rng);
            picked.extend(rest.into_iter().take(m - picked.len()));
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            target -= w;
            if target < 0.0 {
                chosen = i;
                break;
            }
            chosen = i;
        }
        picked.push(chosen);
        weights[chosen] = 0.0;
    }
    picked.sort_unstable();
    picked
}

/// Ratio of the block-mean gap to the global-mean gap. Returns 1 when the
/// total gap is below 1e-14 (converged).
pub fn rho(block: &[usize], true_gaps: &[f64]) -> f64 {
    let total: f64 = true_gaps.iter().sum();
    if total <= 1e-14 || block.is_empty() {
        return 1.0;
    }
    let block_mean: f64 = block.iter().map(|&i| true_gaps[i]).sum::<f64>() / block.len() as f64;
    let global_mean = total / true_gaps.len() as f64;
    block_mean / global_mean
}
