//! Diagonal Gaussians, both as plain values and on the autodiff graph.

use crate::autodiff::Var;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound of latent standard deviations.
pub const LATENT_STD_FLOOR: f64 = 0.1;
/// Offset added to the decoder's softplus standard deviation.
pub const DECODER_STD_FLOOR: f64 = 1e-3;

/// Mean and standard deviation of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(CoreError::Shape(format!("mean {} vs std {}", mean.len(), std.len())));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(CoreError::Domain(format!("standard deviation {s} is not positive")));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of `x`, summed over dimensions.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| normal_log_pdf(x, m, s))
            .sum()
    }
}

pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * LN_2PI - std.ln() - 0.5 * z * z
}

/// Closed-form `KL(q || p)` between diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(CoreError::Shape(format!("kl between dims {} and {}", q.dim(), p.dim())));
    }
    if q.std.iter().chain(&p.std).any(|s| !(*s > 0.0)) {
        return Err(CoreError::Domain("kl needs positive standard deviations".into()));
    }
    Ok((0..q.dim())
        .map(|i| kl_term(q.mean[i], q.std[i], p.mean[i], p.std[i]))
        .sum())
}

fn kl_term(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let d = mq - mp;
    (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
}

/// A diagonal Gaussian whose parameters live on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GaussVar<'g, T: Scalar> {
    pub mean: Var<'g, T>,
    pub std: Var<'g, T>,
}

impl<'g, T: Scalar> GaussVar<'g, T> {
    /// Latent statistics: `std = 0.1 + 0.9 * sigmoid(raw)`.
    pub fn latent(mean: Var<'g, T>, raw_std: Var<'g, T>) -> Self {
        let std = raw_std
            .sigmoid()
            .mul_scalar(1.0 - LATENT_STD_FLOOR)
            .add_scalar(LATENT_STD_FLOOR);
        Self { mean, std }
    }

    /// Observation statistics: `std = softplus(raw) + 1e-3`.
    pub fn observation(mean: Var<'g, T>, raw_std: Var<'g, T>) -> Self {
        Self {
            mean,
            std: raw_std.softplus().add_scalar(DECODER_STD_FLOOR),
        }
    }

    /// Reparameterized draw `mean + std * eps`.
    pub fn sample(&self, eps: Var<'g, T>) -> Var<'g, T> {
        self.mean + self.std * eps
    }

    /// Summed log-density of `x`.
    pub fn log_prob(&self, x: Var<'g, T>) -> Var<'g, T> {
        let z = (x - self.mean) / self.std;
        let elementwise = z.square().mul_scalar(-0.5) - self.std.ln();
        let n = x.value().len() as f64;
        elementwise.sum().add_scalar(-0.5 * LN_2PI * n)
    }

    /// Summed `KL(self || p)`.
    pub fn kl(&self, p: &GaussVar<'g, T>) -> Var<'g, T> {
        let d = self.mean - p.mean;
        let var_p = p.std.square();
        let ratio = (self.std.square() + d.square()) / var_p.mul_scalar(2.0);
        (p.std.ln() - self.std.ln() + ratio).sum().add_scalar(-0.5 * self.mean.value().len() as f64)
    }

    pub fn to_params(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean.value().to_f64_vec(),
            std: self.std.value().to_f64_vec(),
        }
    }
}
