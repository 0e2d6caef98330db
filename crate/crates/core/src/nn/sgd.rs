use super::conv::ParamGrad;
use super::model::{ConvNet, Grads, Layer};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    /// A learning rate of zero is accepted: it freezes weights, which the pruning
    /// schedule uses as its static-rank regime.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum SGD with L2 weight decay on weights (not biases).
///
/// `v = momentum * v + (g + decay * w); w -= lr * v`. Weights in masked conv columns
/// are skipped entirely: no gradient, no decay, no momentum carry-over.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f64> {
    cfg: SgdConfig,
    velocity: Vec<Option<ParamGrad<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig, model: &ConvNet<T>) -> Result<Self> {
        cfg.validate()?;
        let velocity = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Some(ParamGrad {
                    weights: vec![T::zero(); c.weights().len()],
                    bias: vec![T::zero(); c.bias().len()],
                }),
                Layer::Fc(f) => Some(ParamGrad {
                    weights: vec![T::zero(); f.weights().len()],
                    bias: vec![T::zero(); f.bias().len()],
                }),
                _ => None,
            })
            .collect();
        Ok(Sgd { cfg, velocity })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: SgdConfig) -> Result<()> {
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn velocity(&self) -> &[Option<ParamGrad<T>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<ParamGrad<T>>>) -> Result<()> {
        let compatible = velocity.len() == self.velocity.len()
            && velocity.iter().zip(&self.velocity).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len(),
                (None, None) => true,
                _ => false,
            });
        if !compatible {
            return Err(Error::Shape("momentum buffers do not match the model".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, model: &mut ConvNet<T>, grads: &Grads<T>) -> Result<()> {
        if grads.len() != model.layers().len() {
            return Err(Error::Shape("gradient list does not match the model".into()));
        }
        let lr = T::of(self.cfg.learning_rate);
        let mu = T::of(self.cfg.momentum);
        let wd = T::of(self.cfg.weight_decay);
        for ((layer, grad), vel) in model.layers_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let (Some(grad), Some(vel)) = (grad, vel.as_mut()) else {
                continue;
            };
            let mut update = |w: &mut [T], b: &mut [T], keep: Option<&[bool]>| -> Result<()> {
                if grad.weights.len() != w.len() || grad.bias.len() != b.len() {
                    return Err(Error::Shape("gradient does not match parameter shape".into()));
                }
                let columns = keep.map_or(w.len(), <[bool]>::len);
                for (i, ((wv, gv), vv)) in w.iter_mut().zip(&grad.weights).zip(&mut vel.weights).enumerate() {
                    if keep.is_some_and(|k| !k[i % columns]) {
                        continue;
                    }
                    *vv = mu * *vv + *gv + wd * *wv;
                    *wv = *wv - lr * *vv;
                }
                for ((bv, gv), vv) in b.iter_mut().zip(&grad.bias).zip(&mut vel.bias) {
                    *vv = mu * *vv + *gv;
                    *bv = *bv - lr * *vv;
                }
                Ok(())
            };
            match layer {
                Layer::Conv(c) => {
                    let mut res = Ok(());
                    c.update_params(|w, b, mask| res = update(w, b, Some(mask)));
                    res?;
                }
                Layer::Fc(f) => {
                    let mut res = Ok(());
                    f.update_params(|w, b| res = update(w, b, None));
                    res?;
                }
                _ => {}
            }
        }
        Ok(())
    }
}
