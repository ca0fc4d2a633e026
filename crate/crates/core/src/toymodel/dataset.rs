use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA: f64 = 0.15;

/// Class A at (-2, 0) and class B at (+2, 0).
pub fn default_centers<T: Scalar>() -> Vec<[T; 2]> {
    vec![[T::of(-2.0), T::zero()], [T::of(2.0), T::zero()]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Mode<T> {
    pub center: [T; 2],
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Sample<T> {
    pub x0: [T; 2],
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SyntheticDataset<T> {
    pub modes: Vec<Mode<T>>,
    pub samples: Vec<Sample<T>>,
    pub sigma: T,
    pub seed: u64,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn center(&self, class_id: usize) -> Option<[T; 2]> {
        self.modes
            .iter()
            .find(|m| m.class_id == class_id)
            .map(|m| m.center)
    }
}

/// Isotropic Gaussian draw around `center`, redrawn until it lies within
/// 4 sigma.
fn draw_point<T: Scalar>(center: [T; 2], sigma: T, rng: &mut ChaCha8Rng) -> [T; 2] {
    let s = sigma.to_f64_lossy();
    loop {
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        if dx * dx + dy * dy <= 16.0 {
            return [center[0] + T::of(s * dx), center[1] + T::of(s * dy)];
        }
    }
}

/// Isotropic blobs, `n_per_class` samples around each center. Class ids
/// follow the order of `centers`.
pub fn make_dataset<T: Scalar>(
    n_per_class: usize,
    centers: &[[T; 2]],
    sigma: T,
    seed: u64,
) -> Result<SyntheticDataset<T>> {
    if centers.len() < 2 {
        return Err(Error::param(
            "centers",
            format!("need at least 2, got {}", centers.len()),
        ));
    }
    if !(sigma >= T::zero()) || !sigma.is_finite() {
        return Err(Error::param(
            "sigma",
            format!("must be finite and >= 0, got {sigma}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<Mode<T>> = centers
        .iter()
        .enumerate()
        .map(|(class_id, &center)| Mode { center, class_id })
        .collect();
    let mut samples = Vec::with_capacity(n_per_class * modes.len());
    for m in &modes {
        for _ in 0..n_per_class {
            samples.push(Sample {
                x0: draw_point(m.center, sigma, &mut rng),
                class_id: m.class_id,
            });
        }
    }
    Ok(SyntheticDataset {
        modes,
        samples,
        sigma,
        seed,
    })
}

/// Fresh `n x 2` draws from one class of the dataset's generating
/// distribution.
pub fn sample_class<T: Scalar>(
    dataset: &SyntheticDataset<T>,
    class_id: usize,
    n: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let center = dataset
        .center(class_id)
        .ok_or_else(|| Error::param("class_id", format!("no mode with class {class_id}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.extend(draw_point(center, dataset.sigma, &mut rng));
    }
    Tensor::new(vec![n, 2], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_keeps_modes() {
        let d = make_dataset::<f64>(0, &default_centers(), 0.15, 1).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.modes.len(), 2);
        assert_eq!(d.center(1), Some([2.0, 0.0]));
    }

    #[test]
    fn zero_sigma_collapses_to_centers() {
        let d = make_dataset::<f64>(10, &default_centers(), 0.0, 1).unwrap();
        for s in &d.samples {
            assert_eq!(s.x0, d.modes[s.class_id].center);
        }
    }

    #[test]
    fn samples_stay_within_four_sigma() {
        let d = make_dataset::<f64>(5000, &default_centers(), 0.15, 2).unwrap();
        for s in &d.samples {
            let c = d.modes[s.class_id].center;
            let r = ((s.x0[0] - c[0]).powi(2) + (s.x0[1] - c[1]).powi(2)).sqrt();
            assert!(r <= 4.0 * 0.15 + 1e-12);
        }
    }

    #[test]
    fn class_means_within_standard_error_bound() {
        let (n, sigma) = (2000, 0.15);
        let d = make_dataset::<f64>(n, &default_centers(), sigma, 3).unwrap();
        let bound = 3.0 * sigma / (n as f64).sqrt();
        for m in &d.modes {
            let pts: Vec<_> = d.samples.iter().filter(|s| s.class_id == m.class_id).collect();
            assert_eq!(pts.len(), n);
            for axis in 0..2 {
                let mean = pts.iter().map(|s| s.x0[axis]).sum::<f64>() / n as f64;
                assert!(
                    (mean - m.center[axis]).abs() <= bound,
                    "class {} axis {axis}",
                    m.class_id
                );
            }
        }
    }

    #[test]
    fn rejects_single_center() {
        assert!(make_dataset::<f64>(3, &[[0.0, 0.0]], 0.1, 0).is_err());
        assert!(make_dataset::<f64>(3, &default_centers(), -0.1, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_dataset::<f64>(20, &default_centers(), 0.5, 9).unwrap();
        let b = make_dataset::<f64>(20, &default_centers(), 0.5, 9).unwrap();
        assert_eq!(a, b);
        let t = sample_class(&a, 0, 16, 4).unwrap();
        assert_eq!(t.shape(), &[16, 2]);
        assert_eq!(t, sample_class(&a, 0, 16, 4).unwrap());
    }
}
