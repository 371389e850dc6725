use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::task::permutation;
use crate::autodiff::Tensor;
use crate::error::{CocaError, Result};
use crate::seed;

/// Noise standard deviation per severity, in units of the feature std.
pub const NOISE_LEVELS: [f64; 5] = [0.25, 0.5, 0.75, 1.0, 1.5];
/// Multiplicative contrast per severity.
pub const CONTRAST_LEVELS: [f64; 5] = [0.8, 0.6, 0.45, 0.3, 0.2];
/// Plane rotation angle per severity, in degrees.
pub const ROTATION_DEGREES: [f64; 5] = [10.0, 20.0, 30.0, 45.0, 60.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformNoise,
    ContrastScale,
    FeatureRotation,
    /// Images only.
    Blur3x3,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformNoise,
        CorruptionKind::ContrastScale,
        CorruptionKind::FeatureRotation,
        CorruptionKind::Blur3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::UniformNoise => "uniform_noise",
            CorruptionKind::ContrastScale => "contrast_scale",
            CorruptionKind::FeatureRotation => "feature_rotation",
            CorruptionKind::Blur3x3 => "blur3x3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = Self { kind, severity };
        s.strength()?;
        Ok(s)
    }

    /// The kind-specific parameter for this severity.
    pub fn strength(&self) -> Result<f64> {
        if !(1..=5).contains(&self.severity) {
            return Err(CocaError::invalid(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        let i = usize::from(self.severity - 1);
        Ok(match self.kind {
            CorruptionKind::GaussianNoise | CorruptionKind::UniformNoise => NOISE_LEVELS[i],
            CorruptionKind::ContrastScale => CONTRAST_LEVELS[i],
            CorruptionKind::FeatureRotation => ROTATION_DEGREES[i],
            CorruptionKind::Blur3x3 => f64::from(self.severity),
        })
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.name(), self.severity)
    }
}

/// Applies a corruption to `(N, ...)` features. Labels are untouched by
/// construction; the row count is preserved.
pub fn apply_corruption(features: &Tensor, spec: &CorruptionSpec, seed: u64) -> Result<Tensor> {
    apply_with_strength(features, spec.kind, spec.strength()?, seed)
}

/// Same as [`apply_corruption`] with an explicit parameter instead of a
/// severity: noise scale (in feature stds), contrast factor, angle in degrees,
/// or number of blur passes.
pub fn apply_with_strength(
    features: &Tensor,
    kind: CorruptionKind,
    strength: f64,
    seed: u64,
) -> Result<Tensor> {
    let mut out = features.clone();
    out.zero_grad();
    let std = feature_std(features.data());
    let mut rng = seed::rng(seed);
    match kind {
        CorruptionKind::GaussianNoise => {
            let s = strength * std;
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += s * z;
            }
        }
        CorruptionKind::UniformNoise => {
            // Half-width sqrt(3)*s gives the same variance as the Gaussian kind.
            let a = 3f64.sqrt() * strength * std;
            if a > 0.0 {
                for v in out.data_mut() {
                    *v += rng.random_range(-a..a);
                }
            }
        }
        CorruptionKind::ContrastScale => out.data_mut().iter_mut().for_each(|v| *v *= strength),
        CorruptionKind::FeatureRotation => {
            let width = features.row_width();
            let (sin, cos) = strength.to_radians().sin_cos();
            let perm = permutation(width, seed);
            for row in out.data_mut().chunks_mut(width) {
                for pair in perm.chunks_exact(2) {
                    let (i, j) = (pair[0], pair[1]);
                    let (a, b) = (row[i], row[j]);
                    row[i] = cos * a - sin * b;
                    row[j] = sin * a + cos * b;
                }
            }
        }
        CorruptionKind::Blur3x3 => {
            let s = features.shape();
            if s.len() != 4 {
                return Err(CocaError::invalid(format!(
                    "blur3x3 needs image features (N, C, H, W), got {s:?}"
                )));
            }
            let (c, h, w) = (s[1], s[2], s[3]);
            let passes = strength.round() as usize;
            for img in out.data_mut().chunks_mut(c * h * w) {
                let mut cur = img.to_vec();
                for _ in 0..passes {
                    cur = box_blur(&cur, c, h, w);
                }
                img.copy_from_slice(&cur);
            }
        }
    }
    Ok(out)
}

/// Standard deviation over every entry.
pub fn feature_std(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One pass of a normalized 3x3 box filter per channel; border pixels
/// average over their in-bounds neighbours.
pub(crate) fn box_blur(img: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        acc += plane[yy * w + xx];
                        cnt += 1.0;
                    }
                }
                out[c * h * w + y * w + x] = acc / cnt;
            }
        }
    }
    out
}
