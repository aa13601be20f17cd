//! Differentiation substrate: tape, parameter storage, ADAM, gradient
//! verification and reparameterized sampling.

mod adam;
mod gradcheck;
mod params;
pub mod rng;
mod tape;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, EntryCheck, GradCheckOptions, GradCheckReport};
pub use params::{ParamStore, KNOWN_GROUPS};
pub use tape::{Gradients, Graph, Var};

use crate::nets::GaussianCode;

/// Gradient per parameter entry.
pub type GradMap = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("parameter entry `{0}` already exists")]
    DuplicateEntry(String),
    #[error("unknown parameter entry `{0}`")]
    UnknownEntry(String),
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("parameter entry `{0}` belongs to no group")]
    UngroupedEntry(String),
    #[error("shape mismatch for `{entry}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        entry: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("loss is not finite when perturbing `{entry}` element {index}")]
    NonFiniteLoss { entry: String, index: usize },
    #[error("standard deviation must be non-negative, got {0}")]
    NegativeSigma(f64),
}

/// Exponential linear unit.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn elu_array(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(elu)
}

/// Draws an `n × dim` matrix of standard-normal values.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal))
}

/// `count` samples `μ + σ⊙ε` of a diagonal Gaussian, one per row.
///
/// `count = 0` consumes nothing from `rng`.
pub fn reparam_sample<R: Rng + ?Sized>(
    code: &GaussianCode,
    count: usize,
    rng: &mut R,
) -> Result<Array2<f64>, DiffError> {
    if let Some(&bad) = code.sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(DiffError::NegativeSigma(bad));
    }
    let dim = code.mean.len();
    if count == 0 {
        return Ok(Array2::zeros((0, dim)));
    }
    let eps = standard_normal(rng, count, dim);
    Ok(reparam_with_noise(&code.mean, &code.sigma, &eps))
}

/// `μ + σ⊙ε` for given noise rows.
pub fn reparam_with_noise(mean: &Array1<f64>, sigma: &Array1<f64>, eps: &Array2<f64>) -> Array2<f64> {
    eps * sigma + mean
}

/// Tape form of the reparameterization: `mean + exp(½·logvar) ⊙ eps`,
/// where `eps` is a constant `n × d` block. Gradients reach `mean` and
/// `logvar` only.
pub fn reparam_on_tape(g: &mut Graph<'_>, mean: Var, logvar: Var, eps: Array2<f64>) -> Var {
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps);
    let spread = g.mul(e, sigma);
    g.add(spread, mean)
}
