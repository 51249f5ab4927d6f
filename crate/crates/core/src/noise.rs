//! Additive white Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Image, Shape};
use crate::rng::RngStream;

/// Converts a noise level in the 0-255 convention to normalized units.
pub fn sigma_from_255(sigma_255: f64) -> f64 {
    sigma_255 / 255.0
}

pub fn sigma_to_255(sigma: f64) -> f64 {
    sigma * 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRole {
    Single,
    PairMember,
    GroundTruth,
    SyntheticAdded,
}

impl NoiseRole {
    pub fn tag(&self) -> &'static str {
        match self {
            NoiseRole::Single => "noise/single",
            NoiseRole::PairMember => "noise/pair_member",
            NoiseRole::GroundTruth => "noise/ground_truth",
            NoiseRole::SyntheticAdded => "noise/synthetic_added",
        }
    }
}

/// Description of one Gaussian noise field: level (normalized units), seed and role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
    pub role: NoiseRole,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64, role: NoiseRole) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed, role })
    }

    /// Stream for the `index`-th field of this spec.
    pub fn stream(&self, index: u64) -> RngStream {
        RngStream::derive(self.seed, self.role.tag(), &[index])
    }

    pub fn sample(&self, shape: Shape, index: u64) -> Result<Image> {
        gaussian_field(&mut self.stream(index), shape, self.sigma)
    }
}

/// I.i.d. zero-mean Gaussian field with standard deviation `sigma`.
pub fn gaussian_field(stream: &mut RngStream, shape: Shape, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Image::zeros(shape));
    }
    let data = (0..shape.len())
        .map(|_| sigma * stream.standard_normal())
        .collect();
    Image::from_vec(shape, data)
}

/// Standard-normal probe of the given shape (the `n~` of the MC divergence).
pub fn standard_normal_field(stream: &mut RngStream, shape: Shape) -> Image {
    gaussian_field(stream, shape, 1.0).expect("unit sigma is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_all_zero() {
        let shape = Shape::new(5, 7, 3).unwrap();
        let f = gaussian_field(&mut RngStream::derive(1, "t", &[]), shape, 0.0).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let shape = Shape::gray(2, 2).unwrap();
        assert!(gaussian_field(&mut RngStream::derive(1, "t", &[]), shape, -0.1).is_err());
        assert!(NoiseSpec::new(f64::NAN, 0, NoiseRole::Single).is_err());
    }

    #[test]
    fn field_moments_within_standard_error_bounds() {
        // N = 4096: |mean| <= 4 sigma / sqrt(N), variance within 10% of sigma^2.
        let shape = Shape::gray(64, 64).unwrap();
        let sigma = 0.1;
        let f = gaussian_field(&mut RngStream::derive(20_241_017, "moments", &[]), shape, sigma)
            .unwrap();
        let n = shape.len() as f64;
        assert!(f.mean().abs() <= 4.0 * sigma / n.sqrt(), "mean {}", f.mean());
        let var = f.variance();
        assert!((var / (sigma * sigma) - 1.0).abs() <= 0.1, "variance {var}");
    }

    #[test]
    fn same_spec_reproduces_bits() {
        let spec = NoiseSpec::new(0.1, 99, NoiseRole::PairMember).unwrap();
        let shape = Shape::gray(16, 16).unwrap();
        let a = spec.sample(shape, 3).unwrap();
        let b = spec.sample(shape, 3).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, spec.sample(shape, 4).unwrap());
    }
}
