use rand::Rng;

use super::schedule::{LayerSchedule, PruningSchedule};
use crate::error::{Error, Result};

/// Pruning state of one weight group (one conv weight-matrix column).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub layer_id: usize,
    pub group_index: usize,
    /// Probability that the group is masked in a given iteration.
    pub p: f64,
    /// Current sample `g`; `true` keeps the group for this iteration.
    pub mask: bool,
    /// Set exactly when `p` reaches 1; never cleared.
    pub permanently_pruned: bool,
    pub last_rank: Option<usize>,
}

impl GroupState {
    pub fn new(layer_id: usize, group_index: usize) -> Self {
        GroupState {
            layer_id,
            group_index,
            p: 0.0,
            mask: true,
            permanently_pruned: false,
            last_rank: None,
        }
    }
}

/// Fresh groups (p = 0) for a layer of `count` columns.
pub fn layer_groups(layer_id: usize, count: usize) -> Vec<GroupState> {
    (0..count).map(|j| GroupState::new(layer_id, j)).collect()
}

pub fn pruned_count(groups: &[GroupState]) -> usize {
    groups.iter().filter(|g| g.permanently_pruned).count()
}

/// Outcome of one probability update of a layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerUpdate {
    /// Groups that reached p = 1 in this update, by index.
    pub newly_pruned: Vec<usize>,
    /// Groups that would have reached p = 1 but exceeded the layer target; their p
    /// was left unchanged.
    pub held_back: Vec<usize>,
    /// The layer reached its target in this update.
    pub completed: bool,
}

fn check_permutation(ranks: &[usize], n: usize) -> Result<()> {
    if ranks.len() != n {
        return Err(Error::Shape(format!("{} ranks for {n} groups", ranks.len())));
    }
    let mut seen = vec![false; n];
    for &r in ranks {
        if r >= n || std::mem::replace(&mut seen[r], true) {
            return Err(Error::Config(format!("ranks are not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Applies `p <- clamp(p + delta(rank), 0, 1)` to every group of one layer.
///
/// A group whose `p` reaches 1 becomes permanently pruned. No more than the layer
/// target may ever be pruned: if an update would overshoot, the lowest-ranked
/// candidates are pruned and the rest keep their previous `p`. Once the target is
/// met the layer is complete: the surviving groups are reset to `p = 0` and later
/// updates leave the layer untouched.
pub fn update_probabilities(
    groups: &mut [GroupState],
    ranks: &[usize],
    schedule: &LayerSchedule,
) -> Result<LayerUpdate> {
    check_permutation(ranks, groups.len())?;
    if groups.len() != schedule.groups {
        return Err(Error::Shape(format!(
            "{} groups for a schedule over {}",
            groups.len(),
            schedule.groups
        )));
    }
    let mut update = LayerUpdate::default();
    let already = pruned_count(groups);
    for (g, &r) in groups.iter_mut().zip(ranks) {
        g.last_rank = Some(r);
    }
    if already >= schedule.target {
        return Ok(update);
    }

    let mut candidates = Vec::new();
    for (j, (g, &r)) in groups.iter_mut().zip(ranks).enumerate() {
        if g.permanently_pruned {
            continue;
        }
        let next = (g.p + schedule.delta(r as f64)).clamp(0.0, 1.0);
        if next >= 1.0 {
            candidates.push((r, j));
        } else {
            g.p = next;
        }
    }
    candidates.sort_unstable();
    let capacity = schedule.target - already;
    for (k, &(_, j)) in candidates.iter().enumerate() {
        if k < capacity {
            let g = &mut groups[j];
            g.p = 1.0;
            g.permanently_pruned = true;
            g.mask = false;
            update.newly_pruned.push(j);
        } else {
            update.held_back.push(j);
        }
    }
    if already + update.newly_pruned.len() == schedule.target {
        update.completed = true;
        for g in groups.iter_mut().filter(|g| !g.permanently_pruned) {
            g.p = 0.0;
        }
    }
    update.newly_pruned.sort_unstable();
    update.held_back.sort_unstable();
    Ok(update)
}

/// Monte Carlo mask draw: `g = 0` with probability `p`.
///
/// Groups are visited in slice order and each non-pruned group consumes exactly one
/// uniform draw; permanently pruned groups are masked without consuming randomness.
pub fn sample_masks<R: Rng + ?Sized>(groups: &mut [GroupState], rng: &mut R) {
    for g in groups {
        if g.permanently_pruned {
            g.mask = false;
        } else {
            let u: f64 = rng.random();
            g.mask = u >= g.p;
        }
    }
}

/// True when every layer holds exactly its target of permanently pruned groups
/// (zero for layers excluded from pruning).
pub fn stop_condition(layers: &[Vec<GroupState>], schedule: &PruningSchedule) -> bool {
    layers.len() == schedule.layers.len()
        && layers
            .iter()
            .zip(&schedule.layers)
            .all(|(g, s)| pruned_count(g) == s.map_or(0, |s| s.target))
}
