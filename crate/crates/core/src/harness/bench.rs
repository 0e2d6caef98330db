//! Dense vs column-compacted inference timing.

use std::time::Instant;

use crate::criteria::{conv_flops, flop_fraction};
use crate::error::Result;
use crate::nn::conv::SAMPLES_PER_TASK;
use crate::nn::im2col::{unroll_rows, ConvGeometry};
use crate::nn::{ConvNet, FcLayer, Layer, MaxPool};
use crate::parallel::{map_chunks_mut, single_threaded};
use crate::real::Real;
use crate::tensor::Tensor;

/// A conv layer with masked columns physically removed: the weight matrix keeps
/// only surviving columns and im2col only unrolls the matching patch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactConv<T = f64> {
    geom: ConvGeometry,
    out_channels: usize,
    rows: Vec<usize>,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> CompactConv<T> {
    pub fn kept_columns(&self) -> usize {
        self.rows.len()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        let g = &self.geom;
        let (n, c_out, p, k) = (input.batch(), self.out_channels, g.positions(), self.rows.len());
        let (in_len, out_len) = (g.input_len(), c_out * p);
        let mut out = Tensor::zeros(&[n, c_out, g.out_h(), g.out_w()]);
        let x = input.data();
        map_chunks_mut(out.data_mut(), out_len * SAMPLES_PER_TASK, |task, chunk| {
            let mut cols = vec![T::zero(); k * p];
            for (s, y) in chunk.chunks_exact_mut(out_len).enumerate() {
                let s = task * SAMPLES_PER_TASK + s;
                unroll_rows(g, &x[s * in_len..(s + 1) * in_len], &self.rows, &mut cols);
                for (o, row) in y.chunks_exact_mut(p).enumerate() {
                    row.fill(self.bias[o]);
                }
                if k > 0 {
                    T::gemm(c_out, k, p, T::one(), &self.weights, k as isize, 1, &cols, p as isize, 1, T::one(), y, p as isize, 1);
                }
            }
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompactLayer<T = f64> {
    Conv(CompactConv<T>),
    Relu,
    MaxPool(MaxPool),
    Fc(FcLayer<T>),
}

/// Inference-only copy of a network whose conv layers carry no masked columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel<T = f64> {
    layers: Vec<CompactLayer<T>>,
}

impl<T: Real> CompactModel<T> {
    pub fn from_model(model: &ConvNet<T>) -> Result<Self> {
        let mut shapes = model.conv_input_shapes().into_iter();
        let layers = model
            .layers()
            .iter()
            .map(|layer| {
                Ok(match layer {
                    Layer::Conv(c) => {
                        let [_, h, w] = shapes.next().expect("one input shape per conv layer");
                        let rows: Vec<usize> = (0..c.columns()).filter(|&j| c.mask()[j]).collect();
                        let cols = c.columns();
                        let weights = c
                            .weights()
                            .data()
                            .chunks_exact(cols)
                            .flat_map(|r| rows.iter().map(move |&j| r[j]))
                            .collect();
                        CompactLayer::Conv(CompactConv {
                            geom: c.geometry(h, w)?,
                            out_channels: c.out_channels(),
                            rows,
                            weights,
                            bias: c.bias().to_vec(),
                        })
                    }
                    Layer::Relu => CompactLayer::Relu,
                    Layer::MaxPool(p) => CompactLayer::MaxPool(*p),
                    Layer::Fc(f) => CompactLayer::Fc(f.clone()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(CompactModel { layers })
    }

    pub fn layers(&self) -> &[CompactLayer<T>] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                CompactLayer::Conv(c) => c.forward(&a),
                CompactLayer::Relu => crate::nn::layers::relu_forward(&a),
                CompactLayer::MaxPool(p) => p.forward(&a)?.0,
                CompactLayer::Fc(f) => f.forward(&a)?,
            };
        }
        let (n, k) = (a.batch(), a.sample_len());
        a.reshape(&[n, k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_secs: f64,
    pub min_secs: f64,
    pub runs: usize,
}

/// Runs `f` `warmup` times untimed, then `runs` timed times.
pub fn time_runs<R>(warmup: usize, runs: usize, mut f: impl FnMut() -> R) -> Timing {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let mut total = 0.0;
    let mut min = f64::INFINITY;
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(f());
        let s = t.elapsed().as_secs_f64();
        total += s;
        min = min.min(s);
    }
    Timing { mean_secs: total / runs.max(1) as f64, min_secs: min, runs }
}

/// Like [`time_runs`] for two workloads, alternating `a` and `b` on every run so
/// background load lands on both.
pub fn time_interleaved<R, S>(warmup: usize, runs: usize, mut a: impl FnMut() -> R, mut b: impl FnMut() -> S) -> (Timing, Timing) {
    let mut ta = Vec::with_capacity(runs);
    let mut tb = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let t = Instant::now();
        std::hint::black_box(a());
        let sa = t.elapsed().as_secs_f64();
        let t = Instant::now();
        std::hint::black_box(b());
        let sb = t.elapsed().as_secs_f64();
        if i >= warmup {
            ta.push(sa);
            tb.push(sb);
        }
    }
    let summary = |v: &[f64]| Timing {
        mean_secs: v.iter().sum::<f64>() / runs.max(1) as f64,
        min_secs: v.iter().copied().fold(f64::INFINITY, f64::min),
        runs,
    };
    (summary(&ta), summary(&tb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dense: Timing,
    pub compact: Timing,
    /// Dense mean time over compact mean time.
    pub speedup: f64,
    /// Dense conv FLOPs over remaining conv FLOPs.
    pub theoretical_speedup: f64,
    /// Largest elementwise gap between compact and masked dense outputs.
    pub max_abs_diff: f64,
}

/// Times a dense forward of `model` with every column kept against the compacted
/// form of its current masks, single-threaded, on the batch `x`.
pub fn bench_model<T: Real>(model: &ConvNet<T>, x: &Tensor<T>, warmup: usize, runs: usize) -> Result<BenchReport> {
    let mut dense_model = model.clone();
    let full: Vec<Vec<bool>> = model.conv_masks().iter().map(|m| vec![true; m.len()]).collect();
    dense_model.set_conv_masks(&full)?;
    let dense = CompactModel::from_model(&dense_model)?;
    let compact = CompactModel::from_model(model)?;

    let max_abs_diff = compact.forward(x)?.max_abs_diff(&model.forward(x)?);
    let flops = conv_flops(model);
    let remaining: Vec<f64> = model
        .conv_masks()
        .iter()
        .map(|m| m.iter().filter(|&&k| k).count() as f64 / m.len() as f64)
        .collect();

    let (dense_t, compact_t) = single_threaded(|| time_interleaved(warmup, runs, || dense.forward(x), || compact.forward(x)));
    Ok(BenchReport {
        dense: dense_t,
        compact: compact_t,
        speedup: dense_t.mean_secs / compact_t.mean_secs,
        theoretical_speedup: 1.0 / flop_fraction(&flops, &remaining),
        max_abs_diff,
    })
}
