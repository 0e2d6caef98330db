use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::im2col::{fold, unroll, ConvGeometry};
use crate::error::{Error, Result};
use crate::parallel::{map_chunks_mut, map_range};
use crate::real::Real;
use crate::tensor::Tensor;

/// Samples handled by one parallel task. Fixed so the reduction order of weight
/// gradients does not depend on the number of threads.
pub(crate) const SAMPLES_PER_TASK: usize = 4;

/// Convolution with a per-column mask over the `(c_out, c_in * kh * kw)` weight matrix.
///
/// Column `j` of that matrix is one weight group. A masked column behaves as if its
/// weights were zero in both passes, and its weight gradient is forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f64> {
    weights: Tensor<T>,
    bias: Vec<T>,
    stride: usize,
    pad: usize,
    mask: Vec<bool>,
    masked: Vec<T>,
}

/// Gradients of one parameterised layer, laid out like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T = f64> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    /// He-normal initialised layer with zero bias and all columns kept.
    pub fn new<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let weights = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            T::of(normal.sample(rng))
        });
        Self::from_parts(weights, vec![T::zero(); out_channels], stride, pad)
    }

    pub fn from_parts(weights: Tensor<T>, bias: Vec<T>, stride: usize, pad: usize) -> Result<Self> {
        let &[c_out, c_in, kh, kw] = weights.shape() else {
            return Err(Error::Shape(format!(
                "conv weights must be (c_out, c_in, kh, kw), got {:?}",
                weights.shape()
            )));
        };
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Config("conv dimensions and stride must be positive".into()));
        }
        if bias.len() != c_out {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                c_out
            )));
        }
        let columns = c_in * kh * kw;
        let masked = weights.data().to_vec();
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            pad,
            mask: vec![true; columns],
            masked,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Number of weight groups (columns of the unrolled weight matrix).
    pub fn columns(&self) -> usize {
        self.mask.len()
    }

    /// Raw weights, unaffected by the mask. Row-major `(c_out, columns)` when flattened.
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// `true` keeps the column, `false` masks it.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Weights with masked columns zeroed; this is what the passes multiply by.
    pub fn masked_weights(&self) -> &[T] {
        &self.masked
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<ConvGeometry> {
        let (kh, kw) = self.kernel();
        ConvGeometry::new(self.in_channels(), height, width, kh, kw, self.stride, self.pad)
    }

    pub fn set_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.columns() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} columns",
                mask.len(),
                self.columns()
            )));
        }
        if mask != self.mask.as_slice() {
            self.mask.copy_from_slice(mask);
            self.refresh_masked();
        }
        Ok(())
    }

    /// Mutates weights and bias in place, then rebuilds the masked copy.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [T], &mut [T], &[bool])) {
        f(self.weights.data_mut(), &mut self.bias, &self.mask);
        self.refresh_masked();
    }

    fn refresh_masked(&mut self) {
        let n = self.columns();
        self.masked.copy_from_slice(self.weights.data());
        for row in self.masked.chunks_exact_mut(n) {
            for (w, &keep) in row.iter_mut().zip(&self.mask) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
    }

    fn input_geometry(&self, input: &Tensor<T>) -> Result<ConvGeometry> {
        let &[_, c, h, w] = input.shape() else {
            return Err(Error::Shape(format!(
                "conv input must be (n, c, h, w), got {:?}",
                input.shape()
            )));
        };
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                c
            )));
        }
        self.geometry(h, w)
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let &[c, h, w] = input_shape else {
            return Err(Error::Shape(format!("conv input must be (c, h, w), got {input_shape:?}")));
        };
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                c
            )));
        }
        let g = self.geometry(h, w)?;
        Ok(vec![self.out_channels(), g.out_h(), g.out_w()])
    }

    /// `(masked W) x im2col(x) + b` for every sample of an `(n, c, h, w)` batch.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = self.input_geometry(input)?;
        let n = input.batch();
        let c_out = self.out_channels();
        let (rows, positions) = (geom.rows(), geom.positions());
        let in_len = geom.input_len();
        let out_len = c_out * positions;
        let mut out = Tensor::zeros(&[n, c_out, geom.out_h(), geom.out_w()]);
        let x = input.data();
        map_chunks_mut(out.data_mut(), out_len * SAMPLES_PER_TASK, |task, chunk| {
            let mut cols = vec![T::zero(); rows * positions];
            for (k, y) in chunk.chunks_exact_mut(out_len).enumerate() {
                let s = task * SAMPLES_PER_TASK + k;
                unroll(&geom, &x[s * in_len..(s + 1) * in_len], &mut cols);
                for (o, row) in y.chunks_exact_mut(positions).enumerate() {
                    row.fill(self.bias[o]);
                }
                T::gemm(
                    c_out, rows, positions, T::one(), &self.masked, rows as isize, 1, &cols,
                    positions as isize, 1, T::one(), y, positions as isize, 1,
                );
            }
        });
        Ok(out)
    }

    /// Gradients for weights, bias and (optionally) the input.
    ///
    /// The input gradient uses the masked weights, and weight gradients of masked
    /// columns are exactly zero.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<(ParamGrad<T>, Option<Tensor<T>>)> {
        let geom = self.input_geometry(input)?;
        let n = input.batch();
        let c_out = self.out_channels();
        let expected = [n, c_out, geom.out_h(), geom.out_w()];
        if grad_out.shape() != expected {
            return Err(Error::Shape(format!(
                "conv grad_out is {:?}, expected {:?}",
                grad_out.shape(),
                expected
            )));
        }
        let (rows, positions) = (geom.rows(), geom.positions());
        let in_len = geom.input_len();
        let out_len = c_out * positions;
        let x = input.data();
        let gy = grad_out.data();

        let per_task = |task: usize, gx_chunk: Option<&mut [T]>| {
            let mut gw = vec![T::zero(); c_out * rows];
            let mut gb = vec![T::zero(); c_out];
            let mut cols = vec![T::zero(); rows * positions];
            let mut dcols = vec![T::zero(); if gx_chunk.is_some() { rows * positions } else { 0 }];
            let first = task * SAMPLES_PER_TASK;
            let last = (first + SAMPLES_PER_TASK).min(n);
            let mut gx_chunk = gx_chunk;
            for s in first..last {
                let g = &gy[s * out_len..(s + 1) * out_len];
                unroll(&geom, &x[s * in_len..(s + 1) * in_len], &mut cols);
                // dW += dY * cols^T
                T::gemm(
                    c_out, positions, rows, T::one(), g, positions as isize, 1, &cols, 1,
                    positions as isize, T::one(), &mut gw, rows as isize, 1,
                );
                for (o, grow) in g.chunks_exact(positions).enumerate() {
                    gb[o] = gb[o] + grow.iter().copied().sum::<T>();
                }
                if let Some(gx) = gx_chunk.as_deref_mut() {
                    // dcols = W_masked^T * dY
                    T::gemm(
                        rows, c_out, positions, T::one(), &self.masked, 1, rows as isize, g,
                        positions as isize, 1, T::zero(), &mut dcols, positions as isize, 1,
                    );
                    let k = s - first;
                    fold(&geom, &dcols, &mut gx[k * in_len..(k + 1) * in_len]);
                }
            }
            (gw, gb)
        };

        let tasks = n.div_ceil(SAMPLES_PER_TASK);
        let (partials, grad_input) = if want_input_grad {
            let mut gx = Tensor::zeros(input.shape());
            let partials = map_chunks_mut(gx.data_mut(), in_len * SAMPLES_PER_TASK, |task, chunk| {
                per_task(task, Some(chunk))
            });
            (partials, Some(gx))
        } else {
            (map_range(tasks, |task| per_task(task, None)), None)
        };

        let mut weights = vec![T::zero(); c_out * rows];
        let mut bias = vec![T::zero(); c_out];
        for (gw, gb) in &partials {
            for (a, b) in weights.iter_mut().zip(gw) {
                *a = *a + *b;
            }
            for (a, b) in bias.iter_mut().zip(gb) {
                *a = *a + *b;
            }
        }
        for row in weights.chunks_exact_mut(rows) {
            for (w, &keep) in row.iter_mut().zip(&self.mask) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
        Ok((ParamGrad { weights, bias }, grad_input))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loop-based convolution over the 4-D weight tensor; masked columns read as zero.
    pub(crate) fn direct_conv(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c_in, h, w] = x.shape().try_into().unwrap();
        let c_out = layer.out_channels();
        let (kh, kw) = layer.kernel();
        let (s, p) = (layer.stride(), layer.pad());
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let wt = layer.weights().data();
        let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
        for b in 0..n {
            for o in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.bias()[o];
                        for c in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let col = (c * kh + ky) * kw + kx;
                                    if !layer.mask()[col] {
                                        continue;
                                    }
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += wt[((o * c_in + c) * kh + ky) * kw + kx]
                                        * x.data()[((b * c_in + c) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * c_out + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_layer(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, s: usize, p: usize) -> ConvLayer<f64> {
        let mut layer = ConvLayer::new(c_out, c_in, k, s, p, rng).unwrap();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        layer.update_params(|_, b, _| b.copy_from_slice(&bias));
        layer
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn one_masked_column_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = random_layer(&mut rng, 3, 2, 3, 1, 1);
        let x = random_input(&mut rng, &[2, 2, 4, 4]);
        let mut mask = vec![true; layer.columns()];
        mask[5] = false;
        layer.set_mask(&mask).unwrap();
        let y = layer.forward(&x).unwrap();
        assert!(y.max_abs_diff(&direct_conv(&layer, &x)) < 1e-12);
    }

    #[test]
    fn full_mask_is_identity_and_empty_mask_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = random_layer(&mut rng, 4, 3, 3, 2, 1);
        let x = random_input(&mut rng, &[3, 3, 7, 7]);
        let unmasked = layer.forward(&x).unwrap();
        layer.set_mask(&vec![true; layer.columns()]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), unmasked);

        layer.set_mask(&vec![false; layer.columns()]).unwrap();
        let y = layer.forward(&x).unwrap();
        let per_channel = y.len() / (3 * 4);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, layer.bias()[(i / per_channel) % 4]);
        }
    }

    #[test]
    fn random_masks_match_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(c_out, c_in, k, s, p, h) in &[(5, 3, 3, 1, 1, 6), (2, 4, 5, 2, 2, 9), (6, 1, 1, 1, 0, 5)] {
            let mut layer = random_layer(&mut rng, c_out, c_in, k, s, p);
            let mask: Vec<bool> = (0..layer.columns()).map(|_| rng.random_bool(0.6)).collect();
            layer.set_mask(&mask).unwrap();
            let x = random_input(&mut rng, &[5, c_in, h, h]);
            let y = layer.forward(&x).unwrap();
            assert!(y.max_abs_diff(&direct_conv(&layer, &x)) < 1e-10);
        }
    }

    #[test]
    fn masked_column_gradient_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut layer = random_layer(&mut rng, 3, 2, 3, 1, 1);
        let j = 7;
        let mut mask = vec![true; layer.columns()];
        mask[j] = false;
        layer.set_mask(&mask).unwrap();
        let x = random_input(&mut rng, &[2, 2, 5, 5]);
        let gy = random_input(&mut rng, &[2, 3, 5, 5]);
        let (g, _) = layer.backward(&x, &gy, true).unwrap();
        for o in 0..3 {
            assert_eq!(g.weights[o * layer.columns() + j], 0.0);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = random_layer(&mut rng, 3, 2, 3, 1, 1);
        let x = random_input(&mut rng, &[2, 2, 5, 5]);
        let gy = Tensor::zeros(&[2, 3, 5, 5]);
        let (g, gx) = layer.backward(&x, &gy, true).unwrap();
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
        assert!(gx.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        // objective: <gy, conv(x)>
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = random_layer(&mut rng, 2, 2, 3, 2, 1);
        let x = random_input(&mut rng, &[3, 2, 5, 5]);
        let gy = random_input(&mut rng, &[3, 2, 3, 3]);
        let objective = |l: &ConvLayer<f64>, x: &Tensor<f64>| -> f64 {
            l.forward(x).unwrap().data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let (g, gx) = layer.backward(&x, &gy, true).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for i in 0..g.weights.len() {
            let mut plus = layer.clone();
            plus.update_params(|w, _, _| w[i] += eps);
            let mut minus = layer.clone();
            minus.update_params(|w, _, _| w[i] -= eps);
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * eps);
            assert!(rel(g.weights[i], fd) < 1e-4, "weight {i}: {} vs {fd}", g.weights[i]);
        }
        let gx = gx.unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * eps);
            assert!(rel(gx.data()[i], fd) < 1e-4);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = random_layer(&mut rng, 2, 3, 3, 1, 1);
        let x = random_input(&mut rng, &[1, 2, 5, 5]);
        assert!(matches!(layer.forward(&x), Err(Error::Shape(_))));
        assert!(layer.clone().set_mask(&[true; 3]).is_err());
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layer = random_layer(&mut rng, 8, 3, 3, 1, 1);
        let x = random_input(&mut rng, &[2, 3, 8, 8]);
        let y64 = layer.forward(&x).unwrap();
        let l32 = ConvLayer::<f32>::from_parts(
            layer.weights().cast(),
            layer.bias().iter().map(|&b| b as f32).collect(),
            1,
            1,
        )
        .unwrap();
        let y32 = l32.forward(&x.cast::<f32>()).unwrap();
        let scale = y64.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in y64.data().iter().zip(y32.data()) {
            assert!((a - *b as f64).abs() <= 1e-2 * scale);
        }
    }
}
