//! Samplers for the target latent prior: the uniform hypercube the
//! regularizer matches by default, and the variance-scaled isotropic
//! Gaussians of the prior-uniformity ladder.

use crate::error::{Result, UniregError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorKind {
    /// Independent `U(low, high)` per dimension.
    UniformHypercube { low: f64, high: f64 },
    /// `N(mean, variance_scale * I)`.
    IsotropicGaussian { mean: f64, variance_scale: f64 },
}

/// Declarative description of a latent prior `r(z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub dim: usize,
}

impl PriorSpec {
    pub fn uniform_hypercube(dim: usize, low: f64, high: f64) -> Result<PriorSpec> {
        if dim == 0 {
            return Err(UniregError::Config("prior dim must be positive".into()));
        }
        if !(low < high) {
            return Err(UniregError::Config(format!(
                "uniform hypercube needs low < high, got [{low}, {high}]"
            )));
        }
        Ok(PriorSpec { kind: PriorKind::UniformHypercube { low, high }, dim })
    }

    /// The default target: `U(-1, 1)` per dimension.
    pub fn unit_hypercube(dim: usize) -> PriorSpec {
        PriorSpec::uniform_hypercube(dim, -1.0, 1.0).expect("unit cube is well-formed")
    }

    pub fn isotropic_gaussian(dim: usize, mean: f64, variance_scale: f64) -> Result<PriorSpec> {
        if dim == 0 {
            return Err(UniregError::Config("prior dim must be positive".into()));
        }
        if !(variance_scale > 0.0) || !variance_scale.is_finite() {
            return Err(UniregError::Config(format!(
                "gaussian variance_scale must be positive, got {variance_scale}"
            )));
        }
        Ok(PriorSpec { kind: PriorKind::IsotropicGaussian { mean, variance_scale }, dim })
    }

    /// Short stable identifier used in run ids and summaries.
    pub fn label(&self) -> String {
        match self.kind {
            PriorKind::UniformHypercube { low, high } => format!("uniform_{low}_{high}"),
            PriorKind::IsotropicGaussian { mean, variance_scale } => {
                format!("gaussian_m{mean}_v{variance_scale}")
            }
        }
    }
}

/// Draw `n` i.i.d. rows from the prior.
pub fn sample_prior(spec: &PriorSpec, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(UniregError::Config("sample count must be at least 1".into()));
    }
    let mut values = Vec::with_capacity(n * spec.dim);
    match spec.kind {
        PriorKind::UniformHypercube { low, high } => {
            for _ in 0..n * spec.dim {
                values.push(rng.uniform_in(low, high));
            }
        }
        PriorKind::IsotropicGaussian { mean, variance_scale } => {
            let std = variance_scale.sqrt();
            for _ in 0..n * spec.dim {
                values.push(mean + std * rng.normal());
            }
        }
    }
    Tensor::new(vec![n, spec.dim], values)
}

/// The prior ladder of the uniformity sweep, ordered by increasing
/// uniformity: Gaussians with variance scales 0.1, 1, 5, 10, then the unit
/// hypercube `U(-1, 1)`.
pub fn prior_ladder(dim: usize) -> Vec<PriorSpec> {
    let gaussian = |v| {
        PriorSpec::isotropic_gaussian(dim, 0.0, v).expect("ladder scales are positive")
    };
    vec![
        gaussian(0.1),
        gaussian(1.0),
        gaussian(5.0),
        gaussian(10.0),
        PriorSpec::unit_hypercube(dim),
    ]
}
