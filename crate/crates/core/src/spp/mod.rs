//! Structured probabilistic pruning: schedule, probability updates, mask sampling,
//! the pruning loop and recovery analysis.

pub mod engine;
pub mod groups;
pub mod recovery;
pub mod schedule;

pub use engine::{retrain, spp_run, EngineState, SppConfig, SppEngine, SppOutcome, SppRun};
pub use groups::{sample_masks, stop_condition, update_probabilities, GroupState, LayerUpdate};
pub use recovery::{recovery_ratio, RecoveryRecord};
pub use schedule::{solve_schedule, target_count, LayerSchedule, PruningSchedule, ScheduleParams};
