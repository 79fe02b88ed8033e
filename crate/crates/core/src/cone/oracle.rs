//! Exact optimal returns for small navigation instances.
//!
//! All `2^(2D)` joint actions reduce to the `3^D` displacement vectors, so
//! both solvers search over displacements instead of raw actions.

use super::{index_of, point_of, ConeInstance, StepCause};
use crate::error::{Error, Result};

pub const ORACLE_STATE_LIMIT: u64 = 1_000_000;
const CONVERGENCE_TOL: f64 = 1e-10;

fn displacements(dims: usize) -> Vec<Vec<i64>> {
    let count = 3usize.pow(dims as u32);
    (0..count)
        .map(|mut k| {
            (0..dims)
                .map(|_| {
                    let d = (k % 3) as i64 - 1;
                    k /= 3;
                    d
                })
                .collect()
        })
        .collect()
}

/// Optimal discounted return from the start point over a `max_steps`
/// horizon, by finite-horizon value iteration. Sweeps stop early once
/// successive value functions differ by less than `1e-10`.
pub fn oracle_optimal_return(instance: &ConeInstance) -> Result<f64> {
    let cfg = instance.config();
    let states = (cfg.size as u64)
        .checked_pow(cfg.dims as u32)
        .filter(|&n| n <= ORACLE_STATE_LIMIT)
        .ok_or_else(|| {
            Error::Refused(format!(
                "oracle needs M^D <= {ORACLE_STATE_LIMIT}; got {}^{}",
                cfg.size, cfg.dims
            ))
        })? as usize;
    let moves = displacements(cfg.dims);

    // Precompute each state's successors: (next index, reward, continues).
    let mut successors: Vec<Vec<(usize, f64, bool)>> = Vec::with_capacity(states);
    for s in 0..states {
        let point = point_of(s as u64, cfg.dims, cfg.size);
        let mut succ: Vec<(usize, f64, bool)> = moves
            .iter()
            .map(|delta| {
                let next = instance.apply_displacement(&point, delta);
                let (reward, cause) = instance.outcome(&next);
                (
                    index_of(&next, cfg.size) as usize,
                    reward,
                    cause == StepCause::Ongoing,
                )
            })
            .collect();
        succ.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        succ.dedup_by(|a, b| a.0 == b.0);
        successors.push(succ);
    }

    let mut value = vec![0.0f64; states];
    let mut next_value = vec![0.0f64; states];
    for _ in 0..cfg.max_steps {
        let mut delta: f64 = 0.0;
        for s in 0..states {
            let best = successors[s]
                .iter()
                .map(|&(n, r, cont)| r + if cont { cfg.discount * value[n] } else { 0.0 })
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - value[s]).abs());
            next_value[s] = best;
        }
        std::mem::swap(&mut value, &mut next_value);
        if delta < CONVERGENCE_TOL {
            break;
        }
    }
    Ok(value[0])
}

/// Exhaustive depth-limited search over every displacement sequence.
/// Exponential in `max_steps`; intended as an independent check of
/// [`oracle_optimal_return`] on tiny instances.
pub fn brute_force_optimal_return(instance: &ConeInstance) -> f64 {
    let moves = displacements(instance.config().dims);
    fn search(inst: &ConeInstance, moves: &[Vec<i64>], point: &[usize], depth: usize) -> f64 {
        if depth == 0 {
            return 0.0;
        }
        let gamma = inst.config().discount;
        let mut best = f64::NEG_INFINITY;
        for delta in moves {
            let next = inst.apply_displacement(point, delta);
            let (reward, cause) = inst.outcome(&next);
            let total = if cause == StepCause::Ongoing {
                reward + gamma * search(inst, moves, &next, depth - 1)
            } else {
                reward
            };
            best = best.max(total);
        }
        best
    }
    search(
        instance,
        &moves,
        &instance.start(),
        instance.config().max_steps,
    )
}
