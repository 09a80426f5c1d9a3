//! Synthetic classification data with label noise.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DrmError, Result};
use crate::losses::Sample;
use crate::mlp::{self, MlpSpec};
use crate::param::ParamVector;
use crate::rng::{stream_rng, DrmRng, STREAM_DATA_TRAIN};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// `noise_mask[i]` is set when the label of sample `i` was flipped.
    pub noise_mask: Vec<bool>,
    pub original_labels: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Self {
        let original_labels = samples.iter().map(|s| s.label).collect();
        Dataset {
            noise_mask: vec![false; samples.len()],
            samples,
            num_classes,
            original_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.noise_mask.iter().filter(|&&f| f).count()
    }

    /// The same features with the labels before any flipping.
    pub fn with_original_labels(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .zip(&self.original_labels)
            .map(|(s, &y)| Sample { label: y, ..s.clone() })
            .collect();
        Dataset::new(samples, self.num_classes)
    }
}

/// Class means `separation * (e_k - c)` with `e_k` the k-th unit vector and
/// `c` their centroid, so all pairwise mean distances equal
/// `separation * sqrt(2)`.
pub fn blob_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let c = 1.0 / num_classes as f64;
    (0..num_classes)
        .map(|k| {
            (0..dim)
                .map(|j| {
                    let e = if j == k { 1.0 } else { 0.0 };
                    let centroid = if j < num_classes { c } else { 0.0 };
                    separation * (e - centroid)
                })
                .collect()
        })
        .collect()
}

/// `n` samples from unit-variance Gaussians around [`blob_means`]; sample `i`
/// belongs to class `i % num_classes`. Uses the training-data stream of `seed`.
pub fn gen_gaussian_blobs(num_classes: usize, n: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    gen_gaussian_blobs_on(num_classes, n, dim, separation, &mut stream_rng(seed, STREAM_DATA_TRAIN))
}

pub fn gen_gaussian_blobs_on(
    num_classes: usize,
    n: usize,
    dim: usize,
    separation: f64,
    rng: &mut DrmRng,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(DrmError::InvalidConfig(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(DrmError::InvalidConfig(format!("separation must be > 0, got {separation}")));
    }
    if dim < num_classes {
        return Err(DrmError::InvalidConfig(format!(
            "input dimension {dim} is smaller than the number of classes {num_classes}"
        )));
    }
    let means = blob_means(num_classes, dim, separation);
    let samples = (0..n)
        .map(|i| {
            let k = i % num_classes;
            let x = means[k]
                .iter()
                .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample::classified(x, k)
        })
        .collect();
    Ok(Dataset::new(samples, num_classes))
}

/// Flip exactly `round(frac * m)` uniformly chosen labels to a uniformly
/// chosen different class.
pub fn flip_labels(data: &Dataset, frac: f64, rng: &mut DrmRng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(DrmError::InvalidConfig(format!("noise fraction must be in [0,1], got {frac}")));
    }
    if data.num_classes < 2 {
        return Err(DrmError::InvalidConfig("label flipping needs at least 2 classes".into()));
    }
    let m = data.len();
    let count = (frac * m as f64).round() as usize;
    let mut out = data.clone();
    let mut chosen = sample(rng, m, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let y = data.samples[i].label;
        let shift = rng.random_range(1..data.num_classes);
        out.samples[i].label = (y + shift) % data.num_classes;
        out.noise_mask[i] = true;
    }
    Ok(out)
}

/// Fraction of samples whose arg-max logit matches the label.
pub fn accuracy(spec: &MlpSpec, w: &ParamVector, data: &Dataset) -> Result<f64> {
    mlp::accuracy(spec, w, &data.samples)
}

/// Accuracy of the nearest-class-mean rule with the given means.
pub fn nearest_mean_accuracy(means: &[Vec<f64>], data: &Dataset) -> f64 {
    let correct = data
        .samples
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| m.iter().zip(&s.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..means.len())
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .expect("at least one class");
            best == s.label
        })
        .count();
    correct as f64 / data.len() as f64
}
