//! Analytic vs central finite-difference gradients.

use super::model::{ConvNet, Layer, Objective};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub layer: usize,
    /// `"weights"` or `"bias"`.
    pub param: &'static str,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries in masked columns; both gradients are verified to be zero, then skipped.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    /// Masked entries whose analytic or numeric gradient was not exactly zero.
    pub masked_nonzero: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.masked_nonzero == 0 && self.max_rel_error() < self.tolerance
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients of `objective` with central differences (step 1e-5).
///
/// Intended for small 64-bit models: every parameter is perturbed individually.
pub fn gradient_check(
    model: &ConvNet<f64>,
    input: &Tensor<f64>,
    objective: &Objective,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.objective_and_grads(input, objective)?;
    let mut tensors = Vec::new();
    let mut masked_nonzero = 0;
    for (li, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let mask = match &model.layers()[li] {
            Layer::Conv(c) => Some(c.mask().to_vec()),
            _ => None,
        };
        for (param, analytic) in [("weights", &grad.weights), ("bias", &grad.bias)] {
            let mut numeric = vec![0.0; analytic.len()];
            let mut skip = vec![false; analytic.len()];
            for i in 0..analytic.len() {
                if param == "weights" {
                    if let Some(m) = &mask {
                        skip[i] = !m[i % m.len()];
                    }
                }
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    match &mut m.layers_mut()[li] {
                        Layer::Conv(c) => c.update_params(|w, b, _| perturb(param, w, b, i, delta)),
                        Layer::Fc(f) => f.update_params(|w, b| perturb(param, w, b, i, delta)),
                        _ => unreachable!("only parameterised layers have gradients"),
                    }
                    m.objective(input, objective)
                };
                numeric[i] = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            }
            let mut check = TensorCheck {
                layer: li,
                param,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                checked: 0,
                skipped: 0,
            };
            let mut scale: f64 = 0.0;
            for i in 0..analytic.len() {
                if skip[i] {
                    check.skipped += 1;
                    if analytic[i] != 0.0 || numeric[i] != 0.0 {
                        masked_nonzero += 1;
                    }
                    continue;
                }
                check.checked += 1;
                scale = scale.max(analytic[i].abs()).max(numeric[i].abs());
                check.max_abs_error = check.max_abs_error.max((analytic[i] - numeric[i]).abs());
            }
            check.max_rel_error = if scale > 0.0 { check.max_abs_error / scale } else { 0.0 };
            tensors.push(check);
        }
    }
    Ok(GradCheckReport {
        tensors,
        tolerance,
        masked_nonzero,
    })
}

fn perturb(param: &str, w: &mut [f64], b: &mut [f64], i: usize, delta: f64) {
    if param == "weights" {
        w[i] += delta;
    } else {
        b[i] += delta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::parse_architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(arch: &str, shape: [usize; 3], n: usize, seed: u64) -> (ConvNet<f64>, Tensor<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ConvNet::new(shape, &parse_architecture(arch).unwrap(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0..1.0));
        (net, x, rng)
    }

    #[test]
    fn conv_fc_toy_net() {
        let (net, x, mut rng) = setup("conv(3,3,1,1) relu fc(4)", [2, 5, 5], 3, 21);
        let labels = (0..3).map(|_| rng.random_range(0..4)).collect();
        let report = gradient_check(&net, &x, &Objective::CrossEntropy(labels), 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_model_is_exact_to_rounding() {
        let (net, x, mut rng) = setup("conv(3,3,2,1) conv(2,3,1,1) fc(5)", [2, 7, 7], 2, 22);
        let coeffs = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = gradient_check(&net, &x, &Objective::Linear(coeffs), 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn masked_entries_are_skipped() {
        let (mut net, x, _) = setup("conv(3,3,1,1) relu fc(2)", [2, 4, 4], 2, 23);
        let mut mask = vec![true; 18];
        mask[3] = false;
        mask[10] = false;
        net.set_conv_masks(&[mask]).unwrap();
        let report = gradient_check(&net, &x, &Objective::CrossEntropy(vec![0, 1]), 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.tensors[0].skipped, 2 * 3);
        assert_eq!(report.masked_nonzero, 0);
    }
}
