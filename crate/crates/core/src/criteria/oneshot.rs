use super::allocate::RatioPlan;
use super::importance::layer_ranks;
use crate::error::{Error, Result};
use crate::nn::ConvNet;
use crate::real::Real;
use crate::spp::schedule::target_count;

/// One-shot L1 baseline: in each conv layer, mask the `round(R * Nc)` columns with the
/// smallest L1 norms. Returns the pruned column indices per layer.
pub fn fp_oneshot_prune<T: Real>(model: &mut ConvNet<T>, ratios: &[f64]) -> Result<Vec<Vec<usize>>> {
    let ranks = layer_ranks(model);
    if ratios.len() != ranks.len() {
        return Err(Error::Config(format!(
            "{} pruning ratios for {} conv layers",
            ratios.len(),
            ranks.len()
        )));
    }
    let mut pruned = Vec::with_capacity(ranks.len());
    for ((layer, r), &ratio) in model.conv_layers_mut().zip(&ranks).zip(ratios) {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("pruning ratio {ratio} must lie in [0, 1)")));
        }
        let target = target_count(ratio, r.len());
        let mut mask = layer.mask().to_vec();
        let mut cols = Vec::with_capacity(target);
        for (j, &rank) in r.iter().enumerate() {
            if rank < target {
                mask[j] = false;
                cols.push(j);
            }
        }
        layer.set_mask(&mask)?;
        pruned.push(cols);
    }
    Ok(pruned)
}

pub fn fp_oneshot_prune_plan<T: Real>(model: &mut ConvNet<T>, plan: &RatioPlan) -> Result<Vec<Vec<usize>>> {
    fp_oneshot_prune(model, &plan.pruning_ratios())
}
