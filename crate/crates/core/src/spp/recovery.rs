use std::collections::BTreeSet;

use super::schedule::target_count;
use crate::error::{Error, Result};

/// Groups ranked below the pruning threshold at the first update that end above it.
///
/// The threshold is the integer target `round(R * Nc)`, so the set of initially
/// below-threshold groups has exactly `target` members and the ratio stays in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRecord {
    pub layer_id: usize,
    pub initial_below: BTreeSet<usize>,
    pub final_above: BTreeSet<usize>,
    pub recovery_ratio: f64,
}

fn check_permutation(ranks: &[usize], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    if ranks.len() != n || ranks.iter().any(|&r| r >= n || std::mem::replace(&mut seen[r], true)) {
        return Err(Error::Config(format!("{what} ranks are not a permutation of 0..{n}")));
    }
    Ok(())
}

impl RecoveryRecord {
    pub fn new(layer_id: usize, initial_ranks: &[usize], final_ranks: &[usize], ratio: f64) -> Result<Self> {
        let n = initial_ranks.len();
        check_permutation(initial_ranks, n, "initial")?;
        check_permutation(final_ranks, n, "final")?;
        let target = target_count(ratio, n);
        if target == 0 {
            return Err(Error::Config(format!("R = {ratio} over {n} groups rounds to zero")));
        }
        let initial_below: BTreeSet<usize> = (0..n).filter(|&j| initial_ranks[j] < target).collect();
        let final_above: BTreeSet<usize> = initial_below
            .iter()
            .copied()
            .filter(|&j| final_ranks[j] >= target)
            .collect();
        let recovery_ratio = final_above.len() as f64 / target as f64;
        Ok(RecoveryRecord {
            layer_id,
            initial_below,
            final_above,
            recovery_ratio,
        })
    }
}

/// Fraction of the `round(R * Nc)` initially lowest-ranked groups that end ranked at
/// or above that threshold.
pub fn recovery_ratio(initial_ranks: &[usize], final_ranks: &[usize], ratio: f64) -> Result<f64> {
    Ok(RecoveryRecord::new(0, initial_ranks, final_ranks, ratio)?.recovery_ratio)
}
