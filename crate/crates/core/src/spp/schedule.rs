//! Pruning-probability increments as a function of importance rank.
//!
//! `delta(r)` is a centre-symmetric pair of exponentials: it starts at `A` for the
//! least important group, passes `(N, u*A)` and crosses zero at `r = R * Nc`. Groups
//! ranked below the crossing gain pruning probability, groups above it lose it.

use crate::error::{Error, Result};

/// Global hyper-parameters shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    /// Largest increment, `delta(0)`.
    pub max_increment: f64,
    /// Flatness `u` in (0, 1); smaller is flatter around the centre.
    pub flatness: f64,
    /// Training iterations between probability updates.
    pub interval: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            max_increment: 0.05,
            flatness: 0.25,
            interval: 180,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_increment > 0.0 && self.max_increment.is_finite()) {
            return Err(Error::Config(format!("A = {} must be positive", self.max_increment)));
        }
        if !(self.flatness > 0.0 && self.flatness < 1.0) {
            return Err(Error::Config(format!("u = {} must lie in (0, 1)", self.flatness)));
        }
        if self.interval == 0 {
            return Err(Error::Config("t must be a positive iteration count".into()));
        }
        Ok(())
    }
}

/// Closed-form decay rate `alpha` and centre `N` that put the zero crossing at `R * Nc`.
pub fn solve_schedule(ratio: f64, groups: usize, flatness: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("pruning ratio {ratio} must lie in (0, 1)")));
    }
    if groups == 0 {
        return Err(Error::Config("a layer needs at least one weight group".into()));
    }
    if !(flatness > 0.0 && flatness < 1.0) {
        return Err(Error::Config(format!("u = {flatness} must lie in (0, 1)")));
    }
    let alpha = (2f64.ln() - flatness.ln()) / (ratio * groups as f64);
    let center = -flatness.ln() / alpha;
    Ok((alpha, center))
}

/// Target count of permanently pruned groups: `R * Nc` rounded half-to-even.
pub fn target_count(ratio: f64, groups: usize) -> usize {
    (ratio * groups as f64).round_ties_even() as usize
}

/// Derived schedule for one conv layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSchedule {
    pub ratio: f64,
    pub groups: usize,
    pub alpha: f64,
    pub center: f64,
    pub target: usize,
    pub max_increment: f64,
    pub flatness: f64,
}

impl LayerSchedule {
    pub fn new(ratio: f64, groups: usize, params: &ScheduleParams) -> Result<Self> {
        params.validate()?;
        let (alpha, center) = solve_schedule(ratio, groups, params.flatness)?;
        let target = target_count(ratio, groups);
        if target == 0 {
            return Err(Error::Config(format!(
                "R = {ratio} over {groups} groups rounds to zero groups to prune"
            )));
        }
        if !(center < ratio * groups as f64) {
            return Err(Error::Config(format!(
                "schedule centre {center} is not below R * Nc = {}",
                ratio * groups as f64
            )));
        }
        Ok(LayerSchedule {
            ratio,
            groups,
            alpha,
            center,
            target,
            max_increment: params.max_increment,
            flatness: params.flatness,
        })
    }

    /// Zero crossing `R * Nc`.
    pub fn threshold(&self) -> f64 {
        self.ratio * self.groups as f64
    }

    /// Increment for rank `r` (real-valued so the curve can be probed between ranks).
    pub fn delta(&self, rank: f64) -> f64 {
        let a = self.max_increment;
        if rank <= self.center {
            a * (-self.alpha * rank).exp()
        } else {
            2.0 * self.flatness * a - a * (-self.alpha * (2.0 * self.center - rank)).exp()
        }
    }

    /// Lower bound on probability updates before the whole target can be pruned:
    /// the last group below the threshold gains `delta(target - 1)` per update.
    pub fn min_updates(&self) -> usize {
        let slowest = self.delta((self.target - 1) as f64);
        (1.0 / slowest).ceil() as usize
    }
}

/// All layer schedules plus the update counter `k`.
///
/// A layer with ratio exactly 0 is left out of pruning (`None`); any other ratio must
/// give at least one group to prune.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningSchedule {
    pub params: ScheduleParams,
    pub layers: Vec<Option<LayerSchedule>>,
    pub updates: usize,
}

impl PruningSchedule {
    /// One schedule per conv layer; `ratios` has either one global entry or one per layer.
    pub fn new(params: ScheduleParams, ratios: &[f64], groups: &[usize]) -> Result<Self> {
        let ratios = match ratios.len() {
            1 => vec![ratios[0]; groups.len()],
            n if n == groups.len() => ratios.to_vec(),
            n => {
                return Err(Error::Config(format!(
                    "{n} pruning ratios for {} conv layers",
                    groups.len()
                )))
            }
        };
        let layers = ratios
            .iter()
            .zip(groups)
            .map(|(&r, &g)| {
                if r == 0.0 {
                    Ok(None)
                } else {
                    LayerSchedule::new(r, g, &params).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.iter().all(Option::is_none) {
            return Err(Error::Config("no conv layer has a positive pruning ratio".into()));
        }
        Ok(PruningSchedule {
            params,
            layers,
            updates: 0,
        })
    }

    /// Default safety budget: 50x the slowest layer's analytic lower bound, in iterations.
    pub fn default_max_iterations(&self) -> usize {
        let bound = self.layers.iter().flatten().map(LayerSchedule::min_updates).max().unwrap_or(1);
        50 * self.params.interval * bound
    }
}
