//! Group-level stochastic gates: clipped Gaussian relaxations of Bernoulli
//! variables, one per group, shared across the batch.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_MU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub mu: DVector<f64>,
    pub sigma: f64,
}

impl GateState {
    pub fn new(mu: DVector<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid("gate noise scale must be positive"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(invalid("gate means must be finite"));
        }
        Ok(Self { mu, sigma })
    }

    /// `c` gates at the default mean and noise scale.
    pub fn initial(c: usize) -> Self {
        Self { mu: DVector::from_element(c, DEFAULT_MU), sigma: DEFAULT_SIGMA }
    }

    /// Noise-free gate values used at evaluation time.
    pub fn mean_gates(&self) -> DVector<f64> {
        self.mu.map(|m| m.clamp(0.0, 1.0))
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gate_noise<R: Rng + ?Sized>(c: usize, sigma: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(c, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        sigma * e
    })
}

pub fn gates_from_noise(mu: &DVector<f64>, eps: &DVector<f64>) -> DVector<f64> {
    (mu + eps).map(|v| v.clamp(0.0, 1.0))
}

pub fn sample_gates<R: Rng + ?Sized>(state: &GateState, rng: &mut R) -> DVector<f64> {
    let eps = gate_noise(state.mu.len(), state.sigma, rng);
    gates_from_noise(&state.mu, &eps)
}

/// `P(z_j > 0) = Phi(mu_j / sigma)`.
pub fn open_probability(state: &GateState) -> DVector<f64> {
    state.mu.map(|m| normal_cdf(m / state.sigma))
}

/// Per-feature weights `M z`.
pub fn feature_weights(m: &DMatrix<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    if m.ncols() != z.len() {
        return Err(Error::DimensionMismatch {
            context: "feature_weights",
            expected: format!("{} gates", m.ncols()),
            got: format!("{} gates", z.len()),
        });
    }
    Ok(m * z)
}

/// Scale column `i` of the batch by `zhat_i`.
pub fn apply_gates(x: &DMatrix<f64>, zhat: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != zhat.len() {
        return Err(Error::DimensionMismatch {
            context: "apply_gates",
            expected: format!("{} features", x.ncols()),
            got: format!("{} weights", zhat.len()),
        });
    }
    let mut out = x.clone();
    for (mut col, w) in out.column_iter_mut().zip(zhat.iter()) {
        col *= *w;
    }
    Ok(out)
}
