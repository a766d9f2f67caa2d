//! Gaussian-mixture source domains and rotation/translation/label-noise shifts.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Deterministic class centers with pairwise distance at least `separation`.
///
/// When `dim >= num_classes` the centers are the vertices of a regular simplex
/// (scaled standard basis, centered at the origin) and every pair sits exactly
/// `separation` apart. Lower dimensions fall back to equally spaced points on a
/// circle in the first two coordinates (or on a line when `dim == 1`) with
/// adjacent spacing `separation`.
pub fn class_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let c = num_classes as f64;
    if dim >= num_classes {
        let s = separation / std::f64::consts::SQRT_2;
        (0..num_classes)
            .map(|k| {
                (0..dim)
                    .map(|j| {
                        let e = if j == k { 1.0 } else { 0.0 };
                        let centroid = if j < num_classes { 1.0 / c } else { 0.0 };
                        s * (e - centroid)
                    })
                    .collect()
            })
            .collect()
    } else if dim >= 2 {
        let radius = if num_classes > 1 {
            separation / (2.0 * (std::f64::consts::PI / c).sin())
        } else {
            0.0
        };
        (0..num_classes)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / c;
                let mut m = vec![0.0; dim];
                m[0] = radius * t.cos();
                m[1] = radius * t.sin();
                m
            })
            .collect()
    } else {
        let offset = separation * (c - 1.0) / 2.0;
        (0..num_classes).map(|k| vec![separation * k as f64 - offset]).collect()
    }
}

/// Unit-variance isotropic Gaussian per class, samples laid out class by class.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::invalid("mixture counts must be >= 1"));
    }
    if !(class_separation > 0.0) {
        return Err(Error::invalid("class separation must be positive"));
    }
    let means = class_means(num_classes, dim, class_separation);
    let mut rng = seed::rng(seed);
    let n = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for m in mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + z);
            }
            labels.push(class);
        }
    }
    Dataset::new(features, dim, labels, num_classes)
}

/// Source-to-target covariate and label shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Radians, applied to coordinate pairs (0,1), (2,3), ...
    #[serde(default)]
    pub rotation: f64,
    /// Added after rotation; empty means no translation.
    #[serde(default)]
    pub translation: Vec<f64>,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            label_noise: 0.0,
            seed: 0,
        }
    }

    pub fn rotation(angle: f64) -> Self {
        Self {
            rotation: angle,
            ..Self::none()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::invalid("label noise rate must be in [0, 0.5)"));
        }
        if self.rotation != 0.0 && dim < 2 {
            return Err(Error::invalid("rotation needs at least two feature dimensions"));
        }
        if !self.translation.is_empty() && self.translation.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.translation.len(),
                context: "shift translation",
            });
        }
        Ok(())
    }
}

pub fn apply_shift(source: &Dataset, shift: &ShiftSpec) -> Result<Dataset> {
    let dim = source.dim();
    shift.validate(dim)?;
    let (sin, cos) = shift.rotation.sin_cos();
    let mut features = source.features().to_vec();
    if shift.rotation != 0.0 {
        for row in features.chunks_exact_mut(dim) {
            for pair in row.chunks_exact_mut(2) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = cos * a - sin * b;
                pair[1] = sin * a + cos * b;
            }
        }
    }
    if !shift.translation.is_empty() {
        for row in features.chunks_exact_mut(dim) {
            for (x, t) in row.iter_mut().zip(&shift.translation) {
                *x += t;
            }
        }
    }
    let mut labels = source.labels().to_vec();
    let classes = source.num_classes();
    if shift.label_noise > 0.0 && classes > 1 {
        let mut rng = seed::rng(shift.seed);
        for l in labels.iter_mut() {
            if rng.random::<f64>() < shift.label_noise {
                let other = rng.random_range(0..classes - 1);
                *l = if other >= *l { other + 1 } else { other };
            }
        }
    }
    Dataset::new(features, dim, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    #[test]
    fn simplex_means_are_separated() {
        let m = class_means(10, 12, 3.0);
        for i in 0..10 {
            for j in 0..i {
                let d = linalg::norm(&linalg::sub(&m[i], &m[j]));
                assert!((d - 3.0).abs() < 1e-12);
            }
        }
        for (dim, c) in [(2, 10), (1, 4), (3, 5)] {
            let m = class_means(c, dim, 2.0);
            for i in 0..c {
                for j in 0..i {
                    assert!(linalg::norm(&linalg::sub(&m[i], &m[j])) >= 2.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn mixture_is_deterministic_and_counted() {
        let a = generate_gaussian_mixture(3, 2, 5, 4.0, 9).unwrap();
        let b = generate_gaussian_mixture(3, 2, 5, 4.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        let one = generate_gaussian_mixture(4, 2, 1, 1.0, 0).unwrap();
        assert_eq!(one.len(), 4);
        assert!(generate_gaussian_mixture(3, 2, 5, 0.0, 9).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let d = generate_gaussian_mixture(3, 3, 10, 2.0, 1).unwrap();
        assert_eq!(apply_shift(&d, &ShiftSpec::none()).unwrap(), d);
    }

    #[test]
    fn full_turn_rotation_restores_features() {
        let d = generate_gaussian_mixture(3, 4, 10, 2.0, 1).unwrap();
        let r = apply_shift(&d, &ShiftSpec::rotation(2.0 * std::f64::consts::PI)).unwrap();
        for (a, b) in d.features().iter().zip(r.features()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_row_norms_and_odd_tail() {
        let d = generate_gaussian_mixture(2, 3, 10, 2.0, 2).unwrap();
        let r = apply_shift(&d, &ShiftSpec::rotation(0.7)).unwrap();
        for i in 0..d.len() {
            let (a, b) = (d.row(i), r.row(i));
            assert!((linalg::norm(&a[..2]) - linalg::norm(&b[..2])).abs() < 1e-12);
            assert_eq!(a[2], b[2]);
        }
    }

    #[test]
    fn label_noise_changes_about_the_rate() {
        let d = generate_gaussian_mixture(10, 2, 100, 1.0, 3).unwrap();
        let shift = ShiftSpec {
            label_noise: 0.1,
            seed: 11,
            ..ShiftSpec::none()
        };
        let s = apply_shift(&d, &shift).unwrap();
        let changed = d.labels().iter().zip(s.labels()).filter(|(a, b)| a != b).count();
        // Binomial(1000, 0.1): mean 100, sd 9.5; [60, 140] is > 4 sd wide.
        assert!((60..=140).contains(&changed), "{changed}");
    }

    #[test]
    fn invalid_shifts_rejected() {
        let d = generate_gaussian_mixture(2, 1, 3, 1.0, 0).unwrap();
        assert!(apply_shift(&d, &ShiftSpec::rotation(0.1)).is_err());
        let noisy = ShiftSpec {
            label_noise: 0.5,
            ..ShiftSpec::none()
        };
        assert!(apply_shift(&d, &noisy).is_err());
    }
}
