//! Deterministic synthetic image classification data.
//!
//! Each class is a fixed arrangement of soft coloured blobs: the class index
//! sets how many blobs there are, the angle of the line they sit on and their
//! hue. Samples jitter blob positions and add Gaussian pixel noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{derive_seed, rng};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
/// Share of each class held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    ColoredBlobs,
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorKind,
    /// Standard deviation of the additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticDatasetSpec {
    /// The standard desk-scale task: 4 classes of 8x8 blobs.
    pub fn standard(seed: u64) -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 50,
            image_size: 8,
            seed,
            generator: GeneratorKind::ColoredBlobs,
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be at least 1".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 samples per class to split, got {}",
                self.samples_per_class
            )));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidSpec("image_size must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidSpec(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// Per-class eval count: 20 % rounded, but at least one sample each side.
    pub fn eval_per_class(&self) -> usize {
        let n = self.samples_per_class;
        ((n as f64 * EVAL_FRACTION).round() as usize).clamp(1, n - 1)
    }
}

/// A set of `[n, size, size, 3]` images and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    /// Gather the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }

    fn from_samples(size: usize, samples: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        let n = samples.len();
        let mut data = Vec::with_capacity(n * size * size * CHANNELS);
        let mut labels = Vec::with_capacity(n);
        for (pixels, label) in samples {
            data.extend(pixels);
            labels.push(label);
        }
        let images = if n == 0 {
            // Tensors have no zero extents; an empty split holds a single
            // placeholder row and no labels.
            Tensor::zeros(&[1, size, size, CHANNELS])?
        } else {
            Tensor::from_vec(&[n, size, size, CHANNELS], data)?
        };
        Ok(Split { images, labels })
    }

    pub fn empty(size: usize) -> Result<Self> {
        Self::from_samples(size, Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub eval: Split,
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let channel = |offset: f64| {
        let k = (offset + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [channel(5.0), channel(3.0), channel(1.0)]
}

fn render(spec: &SyntheticDatasetSpec, class: usize, sample_seed: u64) -> Result<Vec<f64>> {
    let size = spec.image_size as f64;
    let k = spec.num_classes as f64;
    let mut r = rng(sample_seed);
    let blobs = 1 + class % 3;
    let angle = PI * class as f64 / k;
    let color = hue_to_rgb(class as f64 / k);
    let sigma = (size / 6.0).max(0.5);
    let spread = size / 4.0;
    let centre = (size - 1.0) / 2.0;
    let mut pixels = vec![0.0; spec.image_size * spec.image_size * CHANNELS];
    for b in 0..blobs {
        let t = if blobs == 1 { 0.0 } else { b as f64 / (blobs - 1) as f64 * 2.0 - 1.0 };
        let jitter = size / 16.0;
        let cy = centre + t * spread * angle.sin() + r.gen_range(-jitter..=jitter);
        let cx = centre + t * spread * angle.cos() + r.gen_range(-jitter..=jitter);
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                let base = (y * spec.image_size + x) * CHANNELS;
                for c in 0..CHANNELS {
                    pixels[base + c] += w * color[c];
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise)
            .map_err(|e| Error::InvalidSpec(format!("noise: {e}")))?;
        for v in pixels.iter_mut() {
            *v += normal.sample(&mut r);
        }
    }
    Ok(pixels)
}

/// Generate the train and eval splits. Every sample draws from its own seed,
/// and each class is split 80/20 after a seeded shuffle, so both splits stay
/// balanced.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let sample_base = derive_seed(spec.seed, "samples");
    let mut split_rng = rng(derive_seed(spec.seed, "split"));
    let n_eval = spec.eval_per_class();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for class in 0..spec.num_classes {
        let mut order: Vec<usize> = (0..spec.samples_per_class).collect();
        order.shuffle(&mut split_rng);
        for (pos, &i) in order.iter().enumerate() {
            let id = (class * spec.samples_per_class + i) as u64;
            let pixels = render(spec, class, sample_base.wrapping_add(id))?;
            if pos < n_eval {
                eval.push((pixels, class));
            } else {
                train.push((pixels, class));
            }
        }
    }
    train.shuffle(&mut split_rng);
    Ok(Dataset {
        train: Split::from_samples(spec.image_size, train)?,
        eval: Split::from_samples(spec.image_size, eval)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let d = generate_dataset(&SyntheticDatasetSpec::standard(7)).unwrap();
        assert_eq!((d.train.len(), d.eval.len()), (160, 40));
        for k in 0..4 {
            assert_eq!(d.eval.labels.iter().filter(|&&l| l == k).count(), 10);
        }
    }

    #[test]
    fn too_few_samples() {
        let mut spec = SyntheticDatasetSpec::standard(0);
        spec.samples_per_class = 1;
        assert!(matches!(generate_dataset(&spec), Err(Error::InvalidSpec(_))));
        spec.samples_per_class = 2;
        let d = generate_dataset(&spec).unwrap();
        assert_eq!((d.train.len(), d.eval.len()), (4, 4));
    }

    #[test]
    fn hues_are_distinct() {
        assert_eq!(hue_to_rgb(0.0), [1.0, 0.0, 0.0]);
        assert_eq!(hue_to_rgb(1.0 / 3.0), [0.0, 1.0, 0.0]);
    }
}
