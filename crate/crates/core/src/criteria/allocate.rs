//! Per-layer pruning ratios from remaining-ratio proportions and a FLOP target.

use crate::error::{Error, Result};
use crate::nn::ConvNet;
use crate::real::Real;

/// Smallest remaining ratio a prunable layer may be assigned.
pub const MIN_REMAINING: f64 = 0.01;

/// Relative tolerance on the achieved FLOP reduction.
pub const FLOP_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RatioPlan {
    /// Remaining-ratio proportion per conv layer; `None` marks a layer kept dense.
    pub proportions: Vec<Option<f64>>,
    /// Fraction of weight columns kept per conv layer, in `(0, 1]`.
    pub remaining: Vec<f64>,
    pub target_speedup: f64,
    /// Dense FLOPs divided by pruned FLOPs under `remaining`.
    pub achieved_speedup: f64,
}

impl RatioPlan {
    /// `R = 1 - remaining` per layer.
    pub fn pruning_ratios(&self) -> Vec<f64> {
        self.remaining.iter().map(|r| 1.0 - r).collect()
    }
}

/// Dense FLOPs per conv layer for one sample: `2 * c_out * H_out * W_out * Nc`.
pub fn conv_flops<T: Real>(model: &ConvNet<T>) -> Vec<f64> {
    model
        .conv_layers()
        .zip(model.conv_input_shapes())
        .map(|(layer, [_, h, w])| {
            let g = layer.geometry(h, w).expect("validated at construction");
            2.0 * (layer.out_channels() * g.positions() * layer.columns()) as f64
        })
        .collect()
}

/// FLOPs of the pruned network relative to dense: `sum F_l * rem_l / sum F_l`.
pub fn flop_fraction(flops: &[f64], remaining: &[f64]) -> f64 {
    let total: f64 = flops.iter().sum();
    flops.iter().zip(remaining).map(|(f, r)| f * r).sum::<f64>() / total
}

fn remaining_for(scale: f64, proportions: &[Option<f64>]) -> Vec<f64> {
    proportions
        .iter()
        .map(|p| p.map_or(1.0, |p| (scale * p).clamp(MIN_REMAINING, 1.0)))
        .collect()
}

/// Finds `s` with `remaining_l = clamp(s * proportion_l, 0.01, 1)` so the pruned
/// network has `1 / target_speedup` of the dense conv FLOPs.
pub fn allocate_ratios_for_flops(proportions: &[Option<f64>], flops: &[f64], target_speedup: f64) -> Result<RatioPlan> {
    if proportions.len() != flops.len() {
        return Err(Error::Config(format!(
            "{} proportions for {} conv layers",
            proportions.len(),
            flops.len()
        )));
    }
    if !(target_speedup > 1.0 && target_speedup.is_finite()) {
        return Err(Error::Config(format!("target speedup {target_speedup} must exceed 1")));
    }
    if let Some(p) = proportions.iter().flatten().find(|&&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::Config(format!("proportion {p} must be positive")));
    }
    if flops.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config("every conv layer needs positive FLOPs".into()));
    }
    let goal = 1.0 / target_speedup;
    let floor = flop_fraction(flops, &remaining_for(0.0, proportions));
    if floor > goal * (1.0 + FLOP_TOLERANCE) {
        return Err(Error::Infeasible(format!(
            "{target_speedup}x is unreachable: at the {MIN_REMAINING} floor the network still has {:.4} of its FLOPs",
            floor
        )));
    }
    let min_p = proportions.iter().flatten().fold(f64::INFINITY, |m, &p| m.min(p));
    let (mut lo, mut hi) = (0.0, if min_p.is_finite() { 1.0 / min_p } else { 1.0 });
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if flop_fraction(flops, &remaining_for(mid, proportions)) > goal {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let remaining = remaining_for(0.5 * (lo + hi), proportions);
    let achieved_speedup = 1.0 / flop_fraction(flops, &remaining);
    if (achieved_speedup / target_speedup - 1.0).abs() > FLOP_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "could only reach {achieved_speedup:.4}x of the requested {target_speedup}x"
        )));
    }
    Ok(RatioPlan {
        proportions: proportions.to_vec(),
        remaining,
        target_speedup,
        achieved_speedup,
    })
}

pub fn allocate_ratios<T: Real>(proportions: &[Option<f64>], model: &ConvNet<T>, target_speedup: f64) -> Result<RatioPlan> {
    allocate_ratios_for_flops(proportions, &conv_flops(model), target_speedup)
}
