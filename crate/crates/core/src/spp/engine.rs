use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::groups::{layer_groups, pruned_count, sample_masks, stop_condition, update_probabilities, GroupState};
use super::recovery::RecoveryRecord;
use super::schedule::{PruningSchedule, ScheduleParams};
use crate::criteria::layer_ranks;
use crate::error::{Error, Result};
use crate::metrics::{Phase, RunMetrics};
use crate::nn::{evaluate, ConvNet, Dataset, SgdConfig, Trainer};
use crate::real::Real;

/// Pruning-loop settings beyond the schedule itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SppConfig {
    pub params: ScheduleParams,
    /// One global ratio or one per conv layer (0 leaves a layer dense).
    pub ratios: Vec<f64>,
    /// Iteration budget; defaults to the schedule's safety bound.
    pub max_iterations: Option<usize>,
    /// Record metrics (and evaluate) every this many probability updates.
    pub eval_every_updates: usize,
    pub eval_batch: usize,
}

impl Default for SppConfig {
    fn default() -> Self {
        SppConfig {
            params: ScheduleParams::default(),
            ratios: vec![0.5],
            max_iterations: None,
            eval_every_updates: 1,
            eval_batch: 256,
        }
    }
}

/// Probability state of the pruning schedule: everything except the SGD step.
///
/// Per iteration `i`: when `i % t == 0`, rerank every conv layer by column L1 norm
/// and update probabilities; then draw fresh masks and install them on the model.
#[derive(Debug, Clone)]
pub struct SppEngine {
    schedule: PruningSchedule,
    groups: Vec<Vec<GroupState>>,
    iteration: usize,
    rng: ChaCha8Rng,
    initial_ranks: Option<Vec<Vec<usize>>>,
    pruned_at: Vec<Vec<Option<usize>>>,
}

/// Saved engine state, enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub groups: Vec<Vec<GroupState>>,
    pub iteration: usize,
    pub updates: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub initial_ranks: Option<Vec<Vec<usize>>>,
    pub pruned_at: Vec<Vec<Option<usize>>>,
}

impl SppEngine {
    pub fn new<T: Real>(model: &ConvNet<T>, params: ScheduleParams, ratios: &[f64], seed: u64) -> Result<Self> {
        let columns: Vec<usize> = model.conv_layers().map(|c| c.columns()).collect();
        if columns.is_empty() {
            return Err(Error::Config("model has no conv layers to prune".into()));
        }
        let schedule = PruningSchedule::new(params, ratios, &columns)?;
        let groups = columns.iter().enumerate().map(|(l, &n)| layer_groups(l, n)).collect();
        Ok(SppEngine {
            schedule,
            groups,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            initial_ranks: None,
            pruned_at: columns.iter().map(|&n| vec![None; n]).collect(),
        })
    }

    pub fn schedule(&self) -> &PruningSchedule {
        &self.schedule
    }

    pub fn groups(&self) -> &[Vec<GroupState>] {
        &self.groups
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Number of probability updates performed so far (`k`).
    pub fn updates(&self) -> usize {
        self.schedule.updates
    }

    pub fn initial_ranks(&self) -> Option<&[Vec<usize>]> {
        self.initial_ranks.as_deref()
    }

    /// Update number (1-based) at which each group became permanently pruned.
    pub fn pruned_at(&self) -> &[Vec<Option<usize>>] {
        &self.pruned_at
    }

    pub fn is_complete(&self) -> bool {
        stop_condition(&self.groups, &self.schedule)
    }

    pub fn pruned_fractions(&self) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| pruned_count(g) as f64 / g.len() as f64)
            .collect()
    }

    pub fn mean_probabilities(&self) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|s| s.p).sum::<f64>() / g.len() as f64)
            .collect()
    }

    pub fn pruned_sets(&self) -> Vec<Vec<usize>> {
        self.groups
            .iter()
            .map(|g| g.iter().filter(|s| s.permanently_pruned).map(|s| s.group_index).collect())
            .collect()
    }

    /// Is a probability update due before this iteration's mask draw?
    pub fn update_due(&self) -> bool {
        self.iteration.is_multiple_of(self.schedule.params.interval)
    }

    /// Runs the update (if due) and installs freshly sampled masks on `model`.
    /// Returns whether an update happened.
    pub fn prepare_iteration<T: Real>(&mut self, model: &mut ConvNet<T>) -> Result<bool> {
        let due = self.update_due();
        if due {
            let ranks = layer_ranks(model);
            if ranks.len() != self.groups.len() {
                return Err(Error::Shape("model conv layers changed during pruning".into()));
            }
            let k = self.schedule.updates + 1;
            for (l, (groups, r)) in self.groups.iter_mut().zip(&ranks).enumerate() {
                let Some(sched) = &self.schedule.layers[l] else {
                    for (g, &rank) in groups.iter_mut().zip(r) {
                        g.last_rank = Some(rank);
                    }
                    continue;
                };
                let up = update_probabilities(groups, r, sched)?;
                for j in up.newly_pruned {
                    self.pruned_at[l][j] = Some(k);
                }
            }
            self.schedule.updates = k;
            if self.initial_ranks.is_none() {
                self.initial_ranks = Some(ranks);
            }
        }
        for groups in &mut self.groups {
            sample_masks(groups, &mut self.rng);
        }
        let masks: Vec<Vec<bool>> = self.groups.iter().map(|g| g.iter().map(|s| s.mask).collect()).collect();
        model.set_conv_masks(&masks)?;
        Ok(due)
    }

    pub fn finish_iteration(&mut self) {
        self.iteration += 1;
    }

    /// Installs the permanent masks and returns recovery records of the pruned layers.
    pub fn finalize<T: Real>(&self, model: &mut ConvNet<T>) -> Result<Vec<RecoveryRecord>> {
        let masks: Vec<Vec<bool>> = self
            .groups
            .iter()
            .map(|g| g.iter().map(|s| !s.permanently_pruned).collect())
            .collect();
        model.set_conv_masks(&masks)?;
        let Some(initial) = &self.initial_ranks else {
            return Ok(Vec::new());
        };
        let final_ranks = layer_ranks(model);
        self.schedule
            .layers
            .iter()
            .enumerate()
            .filter_map(|(l, s)| s.map(|s| (l, s)))
            .map(|(l, s)| RecoveryRecord::new(l, &initial[l], &final_ranks[l], s.ratio))
            .collect()
    }

    pub fn state(&self) -> EngineState {
        EngineState {
            groups: self.groups.clone(),
            iteration: self.iteration,
            updates: self.schedule.updates,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            initial_ranks: self.initial_ranks.clone(),
            pruned_at: self.pruned_at.clone(),
        }
    }

    /// Rebuilds an engine from saved state; the schedule is re-derived from
    /// `params` and `ratios`, which must match the original run.
    pub fn restore<T: Real>(model: &ConvNet<T>, params: ScheduleParams, ratios: &[f64], state: EngineState) -> Result<Self> {
        let mut engine = Self::new(model, params, ratios, 0)?;
        let shapes_match = state.groups.len() == engine.groups.len()
            && state.groups.iter().zip(&engine.groups).all(|(a, b)| a.len() == b.len())
            && state.pruned_at.len() == engine.groups.len();
        if !shapes_match {
            return Err(Error::Shape("saved pruning state does not match the model".into()));
        }
        if state.groups.iter().flatten().any(|g| !(0.0..=1.0).contains(&g.p) || g.permanently_pruned != (g.p == 1.0)) {
            return Err(Error::Format("saved pruning probabilities violate p in [0, 1] / p == 1 iff pruned".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        engine.groups = state.groups;
        engine.iteration = state.iteration;
        engine.schedule.updates = state.updates;
        engine.rng = rng;
        engine.initial_ranks = state.initial_ranks;
        engine.pruned_at = state.pruned_at;
        Ok(engine)
    }
}

/// Result of a completed pruning loop.
#[derive(Debug, Clone)]
pub struct SppOutcome {
    pub metrics: RunMetrics,
    pub recovery: Vec<RecoveryRecord>,
    pub iterations: usize,
    pub updates: usize,
    pub pruned: Vec<Vec<usize>>,
}

/// A pruning run in progress: schedule engine + SGD trainer + metrics.
#[derive(Debug, Clone)]
pub struct SppRun<T = f64> {
    pub engine: SppEngine,
    pub trainer: Trainer<T>,
    pub metrics: RunMetrics,
    pub config: SppConfig,
    /// Loss sum and count since the last recorded point.
    pub loss_sum: f64,
    pub loss_count: usize,
    max_iterations: usize,
}

/// Seed offsets so mask draws and batch order use independent streams.
const MASK_STREAM: u64 = 0x5350_505f_4d41_534b;
const BATCH_STREAM: u64 = 0x5350_505f_4241_5443;

impl<T: Real> SppRun<T> {
    pub fn new(model: &ConvNet<T>, train: &Dataset, config: SppConfig, sgd: SgdConfig, seed: u64) -> Result<Self> {
        if config.eval_every_updates == 0 {
            return Err(Error::Config("eval_every_updates must be positive".into()));
        }
        let engine = SppEngine::new(model, config.params, &config.ratios, seed ^ MASK_STREAM)?;
        let trainer = Trainer::new(model, sgd, train, seed ^ BATCH_STREAM)?;
        Ok(Self::assemble(engine, trainer, RunMetrics::default(), config, 0.0, 0))
    }

    pub fn assemble(
        engine: SppEngine,
        trainer: Trainer<T>,
        metrics: RunMetrics,
        config: SppConfig,
        loss_sum: f64,
        loss_count: usize,
    ) -> Self {
        let max_iterations = config
            .max_iterations
            .unwrap_or_else(|| engine.schedule().default_max_iterations());
        SppRun {
            engine,
            trainer,
            metrics,
            config,
            loss_sum,
            loss_count,
            max_iterations,
        }
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn is_complete(&self) -> bool {
        self.engine.is_complete()
    }

    fn record(&mut self, model: &ConvNet<T>, val: Option<&Dataset>) -> Result<()> {
        let loss = (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64);
        let val_acc = match val {
            Some(v) => Some(evaluate(model, v, self.config.eval_batch)?.accuracy),
            None => None,
        };
        self.metrics.push_point(
            self.engine.iteration(),
            Phase::Prune,
            loss,
            val_acc,
            &self.engine.pruned_fractions(),
            &self.engine.mean_probabilities(),
        );
        self.loss_sum = 0.0;
        self.loss_count = 0;
        Ok(())
    }

    /// One iteration: optional probability update, mask draw, one SGD step.
    pub fn step(&mut self, model: &mut ConvNet<T>, train: &Dataset, val: Option<&Dataset>) -> Result<()> {
        if self.engine.iteration() >= self.max_iterations {
            return Err(Error::Timeout {
                iterations: self.engine.iteration(),
                fractions: self.engine.pruned_fractions(),
            });
        }
        if self.engine.prepare_iteration(model)?
            && (self.engine.updates() - 1).is_multiple_of(self.config.eval_every_updates)
        {
            self.record(model, val)?;
        }
        let loss = self.trainer.step(model, train)?;
        self.loss_sum += loss;
        self.loss_count += 1;
        self.engine.finish_iteration();
        Ok(())
    }

    /// Steps until the stop condition holds (or `limit` iterations have run, when given).
    pub fn run_until(&mut self, model: &mut ConvNet<T>, train: &Dataset, val: Option<&Dataset>, limit: Option<usize>) -> Result<()> {
        while !self.is_complete() && limit.is_none_or(|l| self.engine.iteration() < l) {
            self.step(model, train, val)?;
        }
        Ok(())
    }

    /// Installs the permanent masks, records the final point and recovery ratios.
    pub fn finish(mut self, model: &mut ConvNet<T>, val: Option<&Dataset>) -> Result<SppOutcome> {
        if !self.is_complete() {
            return Err(Error::Timeout {
                iterations: self.engine.iteration(),
                fractions: self.engine.pruned_fractions(),
            });
        }
        let recovery = self.engine.finalize(model)?;
        self.record(model, val)?;
        self.metrics.recovery = recovery.iter().map(|r| (r.layer_id, r.recovery_ratio)).collect();
        Ok(SppOutcome {
            metrics: self.metrics,
            recovery,
            iterations: self.engine.iteration(),
            updates: self.engine.updates(),
            pruned: self.engine.pruned_sets(),
        })
    }
}

/// The full pruning loop on a pre-trained model: repeat (update every `t` iterations,
/// sample masks, SGD step) until every layer has exactly its target pruned, then
/// leave only the permanent masks installed.
pub fn spp_run<T: Real>(
    model: &mut ConvNet<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &SppConfig,
    sgd: SgdConfig,
    seed: u64,
) -> Result<SppOutcome> {
    let mut run = SppRun::new(model, train, config.clone(), sgd, seed)?;
    run.run_until(model, train, val, None)?;
    run.finish(model, val)
}

/// Plain training with the model's current (final) masks; no probability updates.
pub fn retrain<T: Real>(model: &mut ConvNet<T>, train: &Dataset, sgd: SgdConfig, epochs: usize, seed: u64) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(model, sgd, train, seed)?;
    trainer.train_epochs(model, train, epochs)
}
