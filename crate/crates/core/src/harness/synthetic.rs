//! Deterministic Gaussian class blobs rendered as small images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub shape: [usize; 3],
    /// Scale of the per-class mean images; larger separates classes further.
    pub margin: f64,
    /// Standard deviation of per-pixel noise around the class mean.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            samples: 2000,
            shape: [3, 16, 16],
            margin: 1.0,
            noise: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("synthetic dataset needs at least one sample".into()));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::Config(format!("synthetic classes {} must be in 2..=256", self.classes)));
        }
        if self.shape.contains(&0) {
            return Err(Error::Config(format!("synthetic shape {:?} has a zero dimension", self.shape)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite() && self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("synthetic margin and noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Sample `i` has label `i mod classes` and pixels `margin * mean[label] + noise * z`,
/// with class means and `z` drawn from a standard normal.
pub fn synthetic_dataset(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = spec.shape.iter().product();
    let means: Vec<f64> = (0..spec.classes * len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut images = Vec::with_capacity(spec.samples * len);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        let mean = &means[c * len..(c + 1) * len];
        images.extend(mean.iter().map(|m| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.margin * m + spec.noise * z
        }));
        labels.push(c as u8);
    }
    Dataset::new(spec.shape, spec.classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec { samples: 50, shape: [1, 4, 4], ..SyntheticSpec::default() };
        assert_eq!(synthetic_dataset(1, &spec).unwrap(), synthetic_dataset(1, &spec).unwrap());
        assert_ne!(synthetic_dataset(1, &spec).unwrap(), synthetic_dataset(2, &spec).unwrap());
    }

    #[test]
    fn zero_samples_is_an_error() {
        let spec = SyntheticSpec { samples: 0, ..SyntheticSpec::default() };
        assert!(matches!(synthetic_dataset(0, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn labels_cycle_through_classes() {
        let spec = SyntheticSpec { samples: 25, classes: 4, shape: [1, 2, 2], ..SyntheticSpec::default() };
        let d = synthetic_dataset(0, &spec).unwrap();
        assert_eq!(d.len(), 25);
        assert!(d.labels().iter().enumerate().all(|(i, &l)| l as usize == i % 4));
    }
}
