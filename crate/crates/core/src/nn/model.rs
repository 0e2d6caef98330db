use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::conv::{ConvLayer, ParamGrad};
use super::layers::{relu_backward, relu_forward, softmax_cross_entropy, FcLayer, MaxPool};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Architecture description of one layer.
///
/// Text form: `conv(out_channels,kernel,stride,pad)`, `relu`, `maxpool(size,stride)`,
/// `fc(out_features)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Fc {
        out_features: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv({out_channels},{kernel},{stride},{pad})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool { size, stride } => write!(f, "maxpool({size},{stride})"),
            LayerSpec::Fc { out_features } => write!(f, "fc({out_features})"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("layer `{s}`: missing `)`")))?;
                (&s[..open], &close[open + 1..])
            }
            None => (s, ""),
        };
        let nums: Vec<usize> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| {
                    a.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("layer `{s}`: `{a}` is not a count")))
                })
                .collect::<Result<_>>()?
        };
        let spec = match (name.trim(), nums.as_slice()) {
            ("conv", &[out_channels, kernel, stride, pad]) => LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            },
            ("relu", &[]) => LayerSpec::Relu,
            ("maxpool", &[size, stride]) => LayerSpec::MaxPool { size, stride },
            ("fc", &[out_features]) => LayerSpec::Fc { out_features },
            _ => return Err(Error::Config(format!("unrecognised layer `{s}`"))),
        };
        Ok(spec)
    }
}

/// Parses a whitespace- or semicolon-separated list of layer specs.
pub fn parse_architecture(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(|c: char| c.is_whitespace() || c == ';')
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_architecture(specs: &[LayerSpec]) -> String {
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f64> {
    Conv(ConvLayer<T>),
    Relu,
    MaxPool(MaxPool),
    Fc(FcLayer<T>),
}

/// Per-layer gradients; `None` for layers without parameters.
pub type Grads<T = f64> = Vec<Option<ParamGrad<T>>>;

/// What the backward pass differentiates.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Mean softmax cross-entropy against class labels.
    CrossEntropy(Vec<usize>),
    /// `sum(coeffs * logits)`, linear in the logits. Used for gradient checks.
    Linear(Vec<f64>),
}

/// Activations saved by a training forward pass.
pub struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    pool_argmax: Vec<Vec<usize>>,
    pub logits: Tensor<T>,
}

/// An ordered stack of layers over `(c, h, w)` inputs producing `(n, classes)` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<T = f64> {
    input_shape: [usize; 3],
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
}

fn shape_after<T: Real>(layer: &Layer<T>, shape: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv(c) => c.output_shape(shape),
        Layer::Relu => Ok(shape.to_vec()),
        Layer::MaxPool(p) => p.output_shape(shape),
        Layer::Fc(fc) => {
            let features: usize = shape.iter().product();
            if features != fc.in_features() {
                return Err(Error::Shape(format!(
                    "fc expects {} features, previous layer gives {shape:?}",
                    fc.in_features()
                )));
            }
            Ok(vec![fc.out_features()])
        }
    }
}

impl<T: Real> ConvNet<T> {
    /// Builds and randomly initialises a network, checking that shapes chain.
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let c_in = *shape.first().filter(|_| shape.len() == 3).ok_or_else(|| {
                        Error::Config(format!("conv after a flattening layer (shape {shape:?})"))
                    })?;
                    Layer::Conv(ConvLayer::new(out_channels, c_in, kernel, stride, pad, rng)?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool(MaxPool { size, stride }),
                LayerSpec::Fc { out_features } => {
                    Layer::Fc(FcLayer::new(out_features, shape.iter().product(), rng)?)
                }
            };
            shape = shape_after(&layer, &shape)?;
            layers.push(layer);
        }
        Self::from_layers(input_shape, specs.to_vec(), layers)
    }

    /// Assembles a network from existing layers (e.g. loaded from a checkpoint).
    pub fn from_layers(input_shape: [usize; 3], specs: Vec<LayerSpec>, layers: Vec<Layer<T>>) -> Result<Self> {
        if specs.len() != layers.len() {
            return Err(Error::Config("layer specs and layers differ in length".into()));
        }
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = shape_after(layer, &shape)?;
        }
        Ok(ConvNet {
            input_shape,
            specs,
            layers,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Per-sample input shape of every layer, plus the final output shape.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for layer in &self.layers {
            let next = shape_after(layer, shapes.last().expect("non-empty"))
                .expect("shapes validated at construction");
            shapes.push(next);
        }
        shapes
    }

    pub fn num_classes(&self) -> usize {
        self.shapes().last().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Indices (into [`layers`](Self::layers)) of convolution layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Input `(c, h, w)` shape of each conv layer, in conv order.
    pub fn conv_input_shapes(&self) -> Vec<[usize; 3]> {
        let shapes = self.shapes();
        self.conv_indices()
            .into_iter()
            .map(|i| [shapes[i][0], shapes[i][1], shapes[i][2]])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights().len() + c.bias().len(),
                Layer::Fc(f) => f.weights().len() + f.bias().len(),
                _ => 0,
            })
            .sum()
    }

    /// Sets the column masks of all conv layers, in conv order.
    pub fn set_conv_masks(&mut self, masks: &[Vec<bool>]) -> Result<()> {
        let count = self.conv_layers().count();
        if masks.len() != count {
            return Err(Error::Shape(format!("{} masks for {count} conv layers", masks.len())));
        }
        for (layer, mask) in self.conv_layers_mut().zip(masks) {
            layer.set_mask(mask)?;
        }
        Ok(())
    }

    pub fn conv_masks(&self) -> Vec<Vec<bool>> {
        self.conv_layers().map(|c| c.mask().to_vec()).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != self.input_shape {
            return Err(Error::Shape(format!(
                "network expects (n, {}, {}, {}) input, got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference: logits of shape `(n, classes)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                Layer::Conv(c) => c.forward(&a)?,
                Layer::Relu => relu_forward(&a),
                Layer::MaxPool(p) => p.forward(&a)?.0,
                Layer::Fc(f) => f.forward(&a)?,
            };
        }
        let n = a.batch();
        let k = a.sample_len();
        let out = a.reshape(&[n, k])?;
        out.check_finite("network output")?;
        Ok(out)
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pool_argmax = Vec::new();
        let mut a = x.clone();
        for layer in &self.layers {
            let next = match layer {
                Layer::Conv(c) => c.forward(&a)?,
                Layer::Relu => relu_forward(&a),
                Layer::MaxPool(p) => {
                    let (y, arg) = p.forward(&a)?;
                    pool_argmax.push(arg);
                    y
                }
                Layer::Fc(f) => f.forward(&a)?,
            };
            inputs.push(std::mem::replace(&mut a, next));
        }
        let n = a.batch();
        let k = a.sample_len();
        let logits = a.reshape(&[n, k])?;
        logits.check_finite("network output")?;
        Ok(Trace {
            inputs,
            pool_argmax,
            logits,
        })
    }

    /// Backpropagates `grad_logits` through a saved trace.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: Tensor<T>) -> Result<Grads<T>> {
        let mut grads: Grads<T> = vec![None; self.layers.len()];
        let mut last_shape = vec![trace.logits.batch()];
        last_shape.extend(self.shapes().last().expect("non-empty"));
        let mut g = grad_logits.reshape(&last_shape)?;
        let mut pool_idx = trace.pool_argmax.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let need_input = i > 0;
            g = match layer {
                Layer::Conv(c) => {
                    let (pg, gx) = c.backward(input, &g, need_input)?;
                    grads[i] = Some(pg);
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                Layer::Relu => relu_backward(input, &g)?,
                Layer::MaxPool(p) => {
                    pool_idx -= 1;
                    p.backward(input.shape(), &trace.pool_argmax[pool_idx], &g)?
                }
                Layer::Fc(f) => {
                    let (pg, gx) = f.backward(input, &g.reshape(&[input.batch(), f.out_features()])?, need_input)?;
                    grads[i] = Some(pg);
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
            };
            g.check_finite("backpropagated gradient")?;
        }
        Ok(grads)
    }

    /// Objective value and parameter gradients for one batch.
    pub fn objective_and_grads(&self, x: &Tensor<T>, objective: &Objective) -> Result<(f64, Grads<T>)> {
        let trace = self.forward_trace(x)?;
        let (value, grad) = evaluate_objective(&trace.logits, objective)?;
        let grads = self.backward(&trace, grad)?;
        Ok((value, grads))
    }

    pub fn loss_and_grads(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Grads<T>)> {
        self.objective_and_grads(x, &Objective::CrossEntropy(labels.to_vec()))
    }

    pub fn objective(&self, x: &Tensor<T>, objective: &Objective) -> Result<f64> {
        Ok(evaluate_objective(&self.forward(x)?, objective)?.0)
    }

    pub fn cast<U: Real>(&self) -> ConvNet<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => {
                    let mut out = ConvLayer::from_parts(
                        c.weights().cast(),
                        c.bias().iter().map(|b| U::of(b.as_f64())).collect(),
                        c.stride(),
                        c.pad(),
                    )
                    .expect("valid layer stays valid");
                    out.set_mask(c.mask()).expect("same column count");
                    Layer::Conv(out)
                }
                Layer::Relu => Layer::Relu,
                Layer::MaxPool(p) => Layer::MaxPool(*p),
                Layer::Fc(f) => Layer::Fc(
                    FcLayer::from_parts(f.weights().cast(), f.bias().iter().map(|b| U::of(b.as_f64())).collect())
                        .expect("valid layer stays valid"),
                ),
            })
            .collect();
        ConvNet {
            input_shape: self.input_shape,
            specs: self.specs.clone(),
            layers,
        }
    }
}

fn evaluate_objective<T: Real>(logits: &Tensor<T>, objective: &Objective) -> Result<(f64, Tensor<T>)> {
    match objective {
        Objective::CrossEntropy(labels) => softmax_cross_entropy(logits, labels),
        Objective::Linear(coeffs) => {
            if coeffs.len() != logits.len() {
                return Err(Error::Shape(format!(
                    "{} coefficients for {} logits",
                    coeffs.len(),
                    logits.len()
                )));
            }
            let value = logits.data().iter().zip(coeffs).map(|(l, c)| l.as_f64() * c).sum();
            let grad = Tensor::from_vec(logits.shape(), coeffs.iter().map(|&c| T::of(c)).collect())?;
            Ok((value, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_specs_round_trip_through_text() {
        let text = "conv(32,5,1,2) relu maxpool(2,2) fc(10)";
        let specs = parse_architecture(text).unwrap();
        assert_eq!(format_architecture(&specs), text);
        assert!(parse_architecture("conv(3,3)").is_err());
        assert!(parse_architecture("dropout").is_err());
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = parse_architecture("conv(4,3,1,0) fc(3) conv(2,3,1,1)").unwrap();
        assert!(ConvNet::<f64>::new([1, 5, 5], &specs, &mut rng).is_err());
        let specs = parse_architecture("conv(4,7,1,0)").unwrap();
        assert!(ConvNet::<f64>::new([1, 5, 5], &specs, &mut rng).is_err());
    }

    #[test]
    fn reference_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = parse_architecture(
            "conv(32,5,1,2) relu maxpool(2,2) conv(32,5,1,2) relu maxpool(2,2) conv(64,5,1,2) relu maxpool(2,2) fc(10)",
        )
        .unwrap();
        let net = ConvNet::<f64>::new([3, 32, 32], &specs, &mut rng).unwrap();
        let cols: Vec<usize> = net.conv_layers().map(|c| c.columns()).collect();
        assert_eq!(cols, vec![75, 800, 800]);
        assert_eq!(net.num_classes(), 10);
        assert_eq!(net.conv_input_shapes(), vec![[3, 32, 32], [32, 16, 16], [32, 8, 8]]);
    }
}
