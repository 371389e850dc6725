use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CocaError, Result};
use crate::seed;

/// Labeled samples; `features` is `(N, ...)` and `labels[i]` belongs to row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rank() < 2 || features.rows() != labels.len() {
            return Err(CocaError::shape(
                "dataset",
                format!(
                    "features {:?} with {} labels",
                    features.shape(),
                    labels.len()
                ),
            ));
        }
        if num_classes < 2 {
            return Err(CocaError::invalid(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CocaError::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

fn default_min_separation() -> f64 {
    6.0
}

fn default_sigma() -> f64 {
    1.0
}

fn default_image_noise() -> f64 {
    0.5
}

/// Synthetic source-domain classification task.
///
/// Class geometry (centers or prototype images) is a pure function of the
/// task parameters, so train and test sets drawn with different sample seeds
/// share it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceTask {
    /// Isotropic Gaussian blobs, one per class, with centers at least
    /// `min_separation * sigma` apart.
    GaussianMixture {
        dims: usize,
        num_classes: usize,
        #[serde(default)]
        center_seed: u64,
        #[serde(default = "default_min_separation")]
        min_separation: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Smooth random prototype images plus pixel noise.
    ProceduralImages {
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        #[serde(default)]
        pattern_seed: u64,
        #[serde(default = "default_image_noise")]
        noise: f64,
    },
}

impl SourceTask {
    /// The reference desk task: 8 classes in 32 dimensions.
    pub fn reference(center_seed: u64) -> Self {
        SourceTask::GaussianMixture {
            dims: 32,
            num_classes: 8,
            center_seed,
            min_separation: default_min_separation(),
            sigma: default_sigma(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SourceTask::GaussianMixture { num_classes, .. }
            | SourceTask::ProceduralImages { num_classes, .. } => *num_classes,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            SourceTask::GaussianMixture { dims, .. } => vec![*dims],
            SourceTask::ProceduralImages {
                channels,
                height,
                width,
                ..
            } => vec![*channels, *height, *width],
        }
    }

    /// Per-class centers (mixture) or prototype images (procedural), flattened.
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        match *self {
            SourceTask::GaussianMixture {
                dims,
                num_classes,
                center_seed,
                min_separation,
                sigma,
            } => mixture_centers(dims, num_classes, center_seed, min_separation * sigma),
            SourceTask::ProceduralImages {
                channels,
                height,
                width,
                num_classes,
                pattern_seed,
                ..
            } => Ok(prototypes(
                channels,
                height,
                width,
                num_classes,
                pattern_seed,
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 {
            return Err(CocaError::invalid(format!(
                "a task needs at least 2 classes, got {c}"
            )));
        }
        match *self {
            SourceTask::GaussianMixture {
                dims,
                sigma,
                min_separation,
                ..
            } => {
                if dims == 0 || sigma <= 0.0 || min_separation < 0.0 {
                    return Err(CocaError::invalid(
                        "gaussian_mixture needs dims > 0, sigma > 0, min_separation >= 0",
                    ));
                }
            }
            SourceTask::ProceduralImages {
                channels,
                height,
                width,
                noise,
                ..
            } => {
                if channels * height * width == 0 || noise < 0.0 {
                    return Err(CocaError::invalid(
                        "procedural_images needs a non-empty image and noise >= 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Centers drawn from N(0, spread^2 I) by rejection until every pair is at
/// least `min_dist` apart. The spread puts the typical pairwise distance at
/// 1.4 * `min_dist`.
fn mixture_centers(dims: usize, classes: usize, seed: u64, min_dist: f64) -> Result<Vec<Vec<f64>>> {
    let mut rng = seed::rng(seed::hash64(seed, 0xCE));
    let spread = if min_dist > 0.0 {
        1.4 * min_dist / (2.0 * dims as f64).sqrt()
    } else {
        1.0
    };
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut tries = 0usize;
    while centers.len() < classes {
        tries += 1;
        if tries > 100_000 {
            return Err(CocaError::invalid(format!(
                "could not place {classes} centers {min_dist} apart in {dims} dimensions"
            )));
        }
        let c: Vec<f64> = (0..dims)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                spread * z
            })
            .collect();
        let far = centers.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far {
            centers.push(c);
        }
    }
    Ok(centers)
}

/// Standardized random images smoothed by two box-blur passes.
fn prototypes(channels: usize, h: usize, w: usize, classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed::hash64(seed, 0xB0));
    (0..classes)
        .map(|_| {
            let mut img: Vec<f64> = (0..channels * h * w)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            for _ in 0..2 {
                img = super::corrupt::box_blur(&img, channels, h, w);
            }
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let sd =
                (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64).sqrt();
            img.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
        })
        .collect()
}

/// Draws `n_per_class` samples of every class.
///
/// Rows are interleaved by class (`0, 1, ..., C-1, 0, 1, ...`).
pub fn gen_source(task: &SourceTask, n_per_class: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    if n_per_class == 0 {
        return Err(CocaError::invalid("n_per_class must be >= 1"));
    }
    let means = task.class_means()?;
    let c = task.num_classes();
    let noise = match *task {
        SourceTask::GaussianMixture { sigma, .. } => sigma,
        SourceTask::ProceduralImages { noise, .. } => noise,
    };
    let width = means[0].len();
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(n_per_class * c * width);
    let mut labels = Vec::with_capacity(n_per_class * c);
    for _ in 0..n_per_class {
        for (label, mean) in means.iter().enumerate() {
            data.extend(mean.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + noise * z
            }));
            labels.push(label);
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend(task.sample_shape());
    Dataset::new(Tensor::new(shape, data)?, labels, c)
}

/// Fisher-Yates permutation of `0..n`.
pub(crate) fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_balance() {
        let task = SourceTask::reference(0);
        let d = gen_source(&task, 1, 5).unwrap();
        assert_eq!(d.len(), 8);
        let d = gen_source(&task, 10, 5).unwrap();
        assert_eq!(d.features.shape(), &[80, 32]);
        assert_eq!(d.class_counts(), vec![10; 8]);
    }

    #[test]
    fn deterministic_in_seed() {
        let task = SourceTask::reference(3);
        assert_eq!(
            gen_source(&task, 4, 1).unwrap(),
            gen_source(&task, 4, 1).unwrap()
        );
        assert_ne!(
            gen_source(&task, 4, 1).unwrap(),
            gen_source(&task, 4, 2).unwrap()
        );
    }

    #[test]
    fn rejects_degenerate_tasks() {
        let task = SourceTask::GaussianMixture {
            dims: 4,
            num_classes: 1,
            center_seed: 0,
            min_separation: 6.0,
            sigma: 1.0,
        };
        assert!(gen_source(&task, 3, 0).is_err());
        assert!(gen_source(&SourceTask::reference(0), 0, 0).is_err());
    }

    #[test]
    fn centers_are_separated() {
        let means = SourceTask::reference(11).class_means().unwrap();
        for i in 0..means.len() {
            for j in 0..i {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 6.0);
            }
        }
    }

    #[test]
    fn procedural_images_shape() {
        let task = SourceTask::ProceduralImages {
            channels: 2,
            height: 6,
            width: 6,
            num_classes: 4,
            pattern_seed: 1,
            noise: 0.5,
        };
        let d = gen_source(&task, 3, 0).unwrap();
        assert_eq!(d.features.shape(), &[12, 2, 6, 6]);
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut p = permutation(50, 9);
        p.sort();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
