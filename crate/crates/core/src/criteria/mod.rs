//! Importance measurement and pruning-ratio allocation.

pub mod allocate;
pub mod importance;
pub mod oneshot;
pub mod pca;

pub use allocate::{allocate_ratios, allocate_ratios_for_flops, conv_flops, flop_fraction, RatioPlan, FLOP_TOLERANCE, MIN_REMAINING};
pub use importance::{group_l1_norms, layer_ranks, rank_ascending, GroupNorms};
pub use oneshot::{fp_oneshot_prune, fp_oneshot_prune_plan};
pub use pca::{default_fraction_grid, layer_sensitivity, pca_sensitivity, SensitivityCurve};
