//! Parameter-free layers, the fully-connected layer and the softmax cross-entropy loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::ParamGrad;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(T::zero());
    }
    out
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu grad_out {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let mut g = grad_out.clone();
    for (gv, xv) in g.data_mut().iter_mut().zip(input.data()) {
        if *xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Max pooling over `size x size` windows. Trailing rows/columns that do not fill a
/// window are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let &[c, h, w] = input_shape else {
            return Err(Error::Shape(format!("maxpool input must be (c, h, w), got {input_shape:?}")));
        };
        if self.size == 0 || self.stride == 0 || h < self.size || w < self.size {
            return Err(Error::Config(format!(
                "maxpool {}x{} stride {} does not fit {h}x{w}",
                self.size, self.size, self.stride
            )));
        }
        Ok(vec![c, (h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1])
    }

    /// Returns the pooled tensor and, per output, the flat input index it came from.
    pub fn forward<T: Real>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let &[n, c, h, w] = input.shape() else {
            return Err(Error::Shape(format!("maxpool input must be (n, c, h, w), got {:?}", input.shape())));
        };
        let out_shape = self.output_shape(&[c, h, w])?;
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; out.len()];
        let x = input.data();
        let mut k = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for dy in 0..self.size {
                        for dx in 0..self.size {
                            let idx = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.data_mut()[k] = x[best];
                    argmax[k] = best;
                    k += 1;
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn backward<T: Real>(
        &self,
        input_shape: &[usize],
        argmax: &[usize],
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if argmax.len() != grad_out.len() {
            return Err(Error::Shape("maxpool grad_out does not match forward pass".into()));
        }
        let mut g = Tensor::zeros(input_shape);
        let gd = g.data_mut();
        for (&i, &v) in argmax.iter().zip(grad_out.data()) {
            gd[i] = gd[i] + v;
        }
        Ok(g)
    }
}

/// Fully-connected layer `y = x W^T + b` on the flattened sample. Never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer<T = f64> {
    weights: Tensor<T>,
    bias: Vec<T>,
}

impl<T: Real> FcLayer<T> {
    pub fn new<R: Rng + ?Sized>(out_features: usize, in_features: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, (1.0 / in_features.max(1) as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let weights = Tensor::from_fn(&[out_features, in_features], |_| T::of(normal.sample(rng)));
        Self::from_parts(weights, vec![T::zero(); out_features])
    }

    pub fn from_parts(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let &[out, inp] = weights.shape() else {
            return Err(Error::Shape(format!("fc weights must be (out, in), got {:?}", weights.shape())));
        };
        if out == 0 || inp == 0 {
            return Err(Error::Config("fc dimensions must be positive".into()));
        }
        if bias.len() != out {
            return Err(Error::Shape(format!("fc bias has {} entries for {out} outputs", bias.len())));
        }
        Ok(FcLayer { weights, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn update_params(&mut self, f: impl FnOnce(&mut [T], &mut [T])) {
        f(self.weights.data_mut(), &mut self.bias);
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.sample_len() != self.in_features() || input.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "fc expects {} features per sample, got shape {:?}",
                self.in_features(),
                input.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let (n, inp, out) = (input.batch(), self.in_features(), self.out_features());
        let mut y = Tensor::from_fn(&[n, out], |i| self.bias[i % out]);
        T::gemm(
            n, inp, out, T::one(), input.data(), inp as isize, 1, self.weights.data(), 1,
            inp as isize, T::one(), y.data_mut(), out as isize, 1,
        );
        Ok(y)
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<(ParamGrad<T>, Option<Tensor<T>>)> {
        self.check_input(input)?;
        let (n, inp, out) = (input.batch(), self.in_features(), self.out_features());
        if grad_out.shape() != [n, out] {
            return Err(Error::Shape(format!("fc grad_out is {:?}, expected [{n}, {out}]", grad_out.shape())));
        }
        let mut weights = vec![T::zero(); out * inp];
        T::gemm(
            out, n, inp, T::one(), grad_out.data(), 1, out as isize, input.data(), inp as isize, 1,
            T::zero(), &mut weights, inp as isize, 1,
        );
        let mut bias = vec![T::zero(); out];
        for row in grad_out.data().chunks_exact(out) {
            for (b, g) in bias.iter_mut().zip(row) {
                *b = *b + *g;
            }
        }
        let grad_input = if want_input_grad {
            let mut gx = Tensor::zeros(input.shape());
            T::gemm(
                n, out, inp, T::one(), grad_out.data(), out as isize, 1, self.weights.data(),
                inp as isize, 1, T::zero(), gx.data_mut(), inp as isize, 1,
            );
            Some(gx)
        } else {
            None
        };
        Ok((ParamGrad { weights, bias }, grad_input))
    }
}

/// Mean negative log-likelihood of the softmax over `(n, classes)` logits, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let &[n, k] = logits.shape() else {
        return Err(Error::Shape(format!("logits must be (n, classes), got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for ((row, g), &y) in logits.data().chunks_exact(k).zip(grad.data_mut().chunks_exact_mut(k)).zip(labels) {
        if y >= k {
            return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        let log_sum = sum.ln();
        loss -= row[y].as_f64() - m - log_sum;
        for (j, (gv, v)) in g.iter_mut().zip(row).enumerate() {
            let q = (v.as_f64() - m - log_sum).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            *gv = T::of((q - target) * inv_n);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax cross-entropy loss".into()));
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn certain_prediction_has_zero_loss() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_classes() {
        let logits = Tensor::<f64>::from_vec(&[2, 10], vec![3.0; 20]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[4, 7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((grad.data()[4] - (0.1 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let logits = Tensor::<f64>::from_vec(&[1, 2], vec![1e300, -1e300]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        grad.check_finite("grad").unwrap();
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fc = FcLayer::<f64>::new(4, 6, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 6], |_| rng.random_range(-1.0..1.0));
        let labels = [0usize, 3, 2];
        let loss = |l: &FcLayer<f64>, x: &Tensor<f64>| softmax_cross_entropy(&l.forward(x).unwrap(), &labels).unwrap().0;
        let (_, gy) = softmax_cross_entropy(&fc.forward(&x).unwrap(), &labels).unwrap();
        let (g, gx) = fc.backward(&x, &gy, true).unwrap();
        let eps = 1e-5;
        let mut max_err: f64 = 0.0;
        let scale = g.weights.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..g.weights.len() {
            let mut p = fc.clone();
            p.update_params(|w, _| w[i] += eps);
            let mut m = fc.clone();
            m.update_params(|w, _| w[i] -= eps);
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            max_err = max_err.max((fd - g.weights[i]).abs() / scale);
        }
        assert!(max_err < 1e-4, "{max_err}");
        let gx = gx.unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&fc, &xp) - loss(&fc, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 8., 7.]).unwrap();
        let pool = MaxPool { size: 2, stride: 2 };
        let (y, arg) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 8.0]);
        let g = pool
            .backward(x.shape(), &arg, &Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn relu_masks_non_positive_inputs() {
        let x = Tensor::<f64>::from_vec(&[1, 4], vec![-1.0, 0.0, 2.0, 3.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0, 3.0]);
        let g = relu_backward(&x, &Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
