use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Labelled images stored contiguously as `(n, c, h, w)` 64-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    classes: usize,
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} images of shape {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn images_mut(&mut self) -> &mut [f64] {
        &mut self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers the listed samples into an `(n, c, h, w)` tensor and their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v)));
        }
        let [c, h, w] = self.shape;
        let x = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sizes agree");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Contiguous slice `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let n = self.sample_len();
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images: self.images[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Splits off the last `count` samples.
    pub fn split_tail(&self, count: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(count);
        (self.slice(0, cut), self.slice(cut, self.len()))
    }
}
