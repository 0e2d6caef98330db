//! Patch unrolling so that convolution becomes one matrix product.
//!
//! Row `r` of the unrolled matrix is the kernel tap `(channel, ky, kx)` with
//! `r = channel * kh * kw + ky * kw + kx`; column `q` is the output position
//! `q = oy * out_w + ox`. Row `r` is also column `r` of the `(c_out, c_in * kh * kw)`
//! weight matrix, which is the unit a column mask removes.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Input and kernel geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    out_h: usize,
    out_w: usize,
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let span = input + 2 * pad;
    if stride == 0 || kernel == 0 || span < kernel {
        return Err(Error::Config(format!(
            "{axis}: kernel {kernel} with stride {stride} does not fit input {input} padded by {pad}"
        )));
    }
    if !(span - kernel).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "{axis}: ({input} + 2*{pad} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("convolution input has no channels".into()));
        }
        let out_h = out_dim(height, kernel_h, stride, pad, "height")?;
        let out_w = out_dim(width, kernel_w, stride, pad, "width")?;
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn out_h(&self) -> usize {
        self.out_h
    }

    pub fn out_w(&self) -> usize {
        self.out_w
    }

    /// Rows of the unrolled input (= weight-matrix columns).
    pub fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Output positions (= unrolled-input columns).
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn tap(&self, row: usize) -> (usize, usize, usize) {
        let per_channel = self.kernel_h * self.kernel_w;
        let c = row / per_channel;
        let rem = row % per_channel;
        (c, rem / self.kernel_w, rem % self.kernel_w)
    }

    /// Output columns `[lo, hi)` whose input column index lands inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        let hi = if self.width + self.pad > kx {
            ((self.width + self.pad - kx - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Writes row `row` of the unrolled matrix into `dst` (length `positions()`).
    fn fill_row<T: Real>(&self, input: &[T], row: usize, dst: &mut [T]) {
        let (c, ky, kx) = self.tap(row);
        let (lo, hi) = self.valid_ox(kx);
        let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
        for oy in 0..self.out_h {
            let out = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy as usize >= self.height || lo >= hi {
                out.fill(T::zero());
                continue;
            }
            let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
            out[..lo].fill(T::zero());
            out[hi..].fill(T::zero());
            let ix0 = lo * self.stride + kx - self.pad;
            if self.stride == 1 {
                out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
            } else {
                for (k, o) in out[lo..hi].iter_mut().enumerate() {
                    *o = src[ix0 + k * self.stride];
                }
            }
        }
    }

    /// Accumulates row `row` of an unrolled gradient back into the input gradient.
    fn scatter_row<T: Real>(&self, src: &[T], row: usize, grad_input: &mut [T]) {
        let (c, ky, kx) = self.tap(row);
        let (lo, hi) = self.valid_ox(kx);
        if lo >= hi {
            return;
        }
        let hw = self.height * self.width;
        let plane = &mut grad_input[c * hw..(c + 1) * hw];
        for oy in 0..self.out_h {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy as usize >= self.height {
                continue;
            }
            let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
            let g = &src[oy * self.out_w..(oy + 1) * self.out_w];
            let ix0 = lo * self.stride + kx - self.pad;
            for (k, v) in g[lo..hi].iter().enumerate() {
                let d = &mut dst[ix0 + k * self.stride];
                *d = *d + *v;
            }
        }
    }
}

/// Unrolls one sample `(c, h, w)` into `out`, shape `(rows, positions)`.
pub(crate) fn unroll<T: Real>(geom: &ConvGeometry, input: &[T], out: &mut [T]) {
    let p = geom.positions();
    for (row, dst) in out.chunks_exact_mut(p).enumerate().take(geom.rows()) {
        geom.fill_row(input, row, dst);
    }
}

/// Unrolls only the listed rows, in the given order, into `out` (`rows.len() x positions`).
pub(crate) fn unroll_rows<T: Real>(geom: &ConvGeometry, input: &[T], rows: &[usize], out: &mut [T]) {
    let p = geom.positions();
    for (dst, &row) in out.chunks_exact_mut(p).zip(rows) {
        geom.fill_row(input, row, dst);
    }
}

/// Inverse of [`unroll`] with accumulation: overlapping taps sum into `grad_input`.
pub(crate) fn fold<T: Real>(geom: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let p = geom.positions();
    for (row, src) in cols.chunks_exact(p).enumerate().take(geom.rows()) {
        geom.scatter_row(src, row, grad_input);
    }
}

/// Unrolls a `(c, h, w)` tensor into a `(c * kh * kw, out_h * out_w)` matrix.
///
/// Padding positions contribute zeros.
pub fn im2col<T: Real>(
    input: &Tensor<T>,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::Shape(format!(
            "im2col expects a (c, h, w) tensor, got {:?}",
            input.shape()
        )));
    };
    let geom = ConvGeometry::new(c, h, w, kernel_h, kernel_w, stride, pad)?;
    let mut out = Tensor::zeros(&[geom.rows(), geom.positions()]);
    unroll(&geom, input.data(), out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct index-by-index oracle.
    fn im2col_naive(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * g.positions()];
        for c in 0..g.channels {
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                    for oy in 0..g.out_h() {
                        for ox in 0..g.out_w() {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let v = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < g.height
                                && (ix as usize) < g.width
                            {
                                input[(c * g.height + iy as usize) * g.width + ix as usize]
                            } else {
                                0.0
                            };
                            out[r * g.positions() + oy * g.out_w() + ox] = v;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hand_enumerated_3x3() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let m = im2col(&x, 2, 2, 1, 0).unwrap();
        assert_eq!(m.shape(), &[4, 4]);
        let expected_cols = [[1., 2., 4., 5.], [2., 3., 5., 6.], [4., 5., 7., 8.], [5., 6., 8., 9.]];
        for (q, col) in expected_cols.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                assert_eq!(m.data()[r * 4 + q], *v);
            }
        }
    }

    #[test]
    fn zeros_stay_zero() {
        let x = Tensor::<f64>::zeros(&[2, 5, 5]);
        let m = im2col(&x, 3, 3, 1, 1).unwrap();
        assert_eq!(m.shape(), &[18, 25]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_is_reshape() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 5], |i| i as f64 * 0.5);
        let m = im2col(&x, 1, 1, 1, 0).unwrap();
        assert_eq!(m.shape(), &[3, 20]);
        assert_eq!(m.data(), x.data());
    }

    #[test]
    fn non_integer_output_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 6, 6]);
        assert!(matches!(im2col(&x, 3, 3, 2, 0), Err(Error::Config(_))));
        assert!(matches!(im2col(&x, 7, 7, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn matches_naive_over_geometries() {
        for &(c, h, w, k, s, p) in &[
            (2, 7, 7, 3, 2, 1),
            (3, 8, 6, 5, 1, 2),
            (1, 5, 5, 3, 2, 0),
            (2, 9, 9, 3, 3, 3),
            (1, 4, 4, 5, 1, 2),
        ] {
            let g = ConvGeometry::new(c, h, w, k, k, s, p).unwrap();
            let x: Vec<f64> = (0..g.input_len()).map(|i| (i as f64).sin()).collect();
            let mut out = vec![f64::NAN; g.rows() * g.positions()];
            unroll(&g, &x, &mut out);
            assert_eq!(out, im2col_naive(&x, &g), "geometry {:?}", (c, h, w, k, s, p));
        }
    }

    #[test]
    fn fold_is_adjoint_of_unroll() {
        // <unroll(x), y> == <x, fold(y)>
        let g = ConvGeometry::new(2, 7, 5, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.input_len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..g.rows() * g.positions()).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut ux = vec![0.0; y.len()];
        unroll(&g, &x, &mut ux);
        let mut fy = vec![0.0; x.len()];
        fold(&g, &y, &mut fy);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
