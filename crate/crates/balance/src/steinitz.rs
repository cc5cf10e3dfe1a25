//! Orders zero-sum vector sequences so that every partial sum along the
//! order stays small, by recursive application of the prefix-discrepancy
//! walk.
//!
//! Each level pairs consecutive elements and colors the half-length
//! sequence of pair differences `(v_a - v_b)/2` with the walk; the
//! induced `+-1` coloring on the block has prefix discrepancy at most
//! `2 D + 1` for walk discrepancy `D`, and splits the block into two
//! exactly-half-sized subsequences (one element of each pair per side).
//! The final order is the recursively ordered positive side followed by
//! the reversed recursively ordered negative side, so a prefix is either
//! a prefix of one half or the whole sequence minus a prefix of the
//! other; fluctuations nest instead of adding. Each level then
//! contributes one measured coloring discrepancy, giving the audited
//! bound `max prefix norm <= depth * max level discrepancy + 2`.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{NormMode, VectorInstance, ZERO_SUM_TOL};
use crate::walk::{self, Mode, ModeParams, WalkConfig, WalkError};

#[derive(Debug, Error)]
pub enum SteinitzError {
    #[error("instance is not zero-sum (flag unset or sum too large)")]
    NotZeroSum,
    #[error("steinitz ordering requires L2_UNIT columns, got {0}")]
    WrongNormMode(NormMode),
    #[error("permutation invalid: {0}")]
    InvalidPermutation(String),
    #[error(transparent)]
    Walk(#[from] WalkError),
}

/// A Steinitz ordering with its audit trail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingResult {
    /// `permutation[k]` is the original index placed at position `k`.
    pub permutation: Vec<usize>,
    /// exact `max_t || sum_{i<=t} v_{pi(i)} ||_2`
    pub max_prefix_norm: f64,
    pub recursion_depth: usize,
    /// max induced coloring prefix discrepancy per recursion level
    pub level_discs: Vec<f64>,
    /// `recursion_depth * max(level_discs) + 2`, the audited bound
    pub audited_bound: f64,
}

struct Orderer<'a> {
    inst: &'a VectorInstance,
    config: WalkConfig,
    rng: ChaCha8Rng,
    level_discs: Vec<f64>,
    max_depth: usize,
}

impl<'a> Orderer<'a> {
    /// Max prefix norm of the induced coloring on `cols`.
    fn coloring_disc(&self, cols: &[usize], signs: &[i8]) -> f64 {
        let d = self.inst.d();
        let a = self.inst.matrix();
        let mut sum: DVector<f64> = DVector::zeros(d);
        let mut best = 0.0f64;
        for (k, &j) in cols.iter().enumerate() {
            let c = signs[k] as f64;
            for i in 0..d {
                sum[i] += c * a[(i, j)];
            }
            best = best.max(sum.norm());
        }
        best
    }

    fn order(&mut self, cols: Vec<usize>, depth: usize) -> Result<Vec<usize>, SteinitzError> {
        self.max_depth = self.max_depth.max(depth);
        let k = cols.len();
        if k <= 2 {
            if k == 2 {
                // keep the partial sum smaller first
                let a = self.inst.column(cols[0]).norm();
                let b = self.inst.column(cols[1]).norm();
                if b < a {
                    return Ok(vec![cols[1], cols[0]]);
                }
            }
            return Ok(cols);
        }

        // pair consecutive elements; an odd trailing element pairs with
        // an implicit zero vector
        let d = self.inst.d();
        let a = self.inst.matrix();
        let pairs = k.div_ceil(2);
        let mut w = DMatrix::zeros(d, pairs);
        for p in 0..pairs {
            let ia = cols[2 * p];
            for i in 0..d {
                let vb = if 2 * p + 1 < k {
                    a[(i, cols[2 * p + 1])]
                } else {
                    0.0
                };
                w[(i, p)] = (a[(i, ia)] - vb) / 2.0;
            }
        }
        let sub = VectorInstance::new(w, NormMode::L2Unit, false)
            .expect("pair differences stay inside the unit ball");
        let params = ModeParams::derive(Mode::L2ToL2, pairs, d, self.config.clone());
        let seed = self.rng.next_u64();
        let report = walk::run(&sub, params, seed)?;

        // induced coloring: pair (a, b) gets (y, -y)
        let mut signs = vec![0i8; k];
        for p in 0..pairs {
            let y = report.final_coloring[p];
            signs[2 * p] = y;
            if 2 * p + 1 < k {
                signs[2 * p + 1] = -y;
            }
        }
        let disc = self.coloring_disc(&cols, &signs);
        if self.level_discs.len() <= depth {
            self.level_discs.resize(depth + 1, 0.0);
        }
        self.level_discs[depth] = self.level_discs[depth].max(disc);

        let plus: Vec<usize> = cols
            .iter()
            .zip(&signs)
            .filter(|(_, &s)| s > 0)
            .map(|(&c, _)| c)
            .collect();
        let minus: Vec<usize> = cols
            .iter()
            .zip(&signs)
            .filter(|(_, &s)| s < 0)
            .map(|(&c, _)| c)
            .collect();

        let mut out = self.order(plus, depth + 1)?;
        let mut tail = self.order(minus, depth + 1)?;
        tail.reverse();
        out.extend(tail);
        Ok(out)
    }
}

/// Orders a zero-sum `L2_UNIT` instance. Deterministic given the seed;
/// walk failures propagate.
pub fn steinitz_order(
    inst: &VectorInstance,
    config: &WalkConfig,
    seed: u64,
) -> Result<OrderingResult, SteinitzError> {
    if inst.norm_mode() != NormMode::L2Unit {
        return Err(SteinitzError::WrongNormMode(inst.norm_mode()));
    }
    let n = inst.n();
    let d = inst.d();
    let mut sum: DVector<f64> = DVector::zeros(d);
    for j in 0..n {
        sum += inst.matrix().column(j);
    }
    if !inst.zero_sum() || sum.norm() > ZERO_SUM_TOL * n as f64 {
        return Err(SteinitzError::NotZeroSum);
    }

    let mut orderer = Orderer {
        inst,
        config: config.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        level_discs: Vec::new(),
        max_depth: 0,
    };
    let permutation = orderer.order((0..n).collect(), 0)?;
    let max_prefix_norm = verify_ordering(inst, &permutation)?;
    let depth = orderer.max_depth;
    let max_level = orderer
        .level_discs
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    Ok(OrderingResult {
        permutation,
        max_prefix_norm,
        recursion_depth: depth,
        level_discs: orderer.level_discs,
        audited_bound: depth as f64 * max_level + 2.0,
    })
}

/// Exact max prefix `l2` norm of the permuted sequence.
pub fn verify_ordering(inst: &VectorInstance, perm: &[usize]) -> Result<f64, SteinitzError> {
    let n = inst.n();
    if perm.len() != n {
        return Err(SteinitzError::InvalidPermutation(format!(
            "length {} != n = {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &j in perm {
        if j >= n || seen[j] {
            return Err(SteinitzError::InvalidPermutation(format!(
                "index {j} out of range or repeated"
            )));
        }
        seen[j] = true;
    }
    let d = inst.d();
    let a = inst.matrix();
    let mut sum: DVector<f64> = DVector::zeros(d);
    let mut best = 0.0f64;
    for &j in perm {
        for i in 0..d {
            sum[i] += a[(i, j)];
        }
        best = best.max(sum.norm());
    }
    Ok(best)
}
