//! Factorized Gaussian posteriors over weights.
//!
//! A [`VariationalTensor`] stores a mean and an unconstrained scale `rho`
//! per entry; the standard deviation is `softplus(rho)`. The prior is the
//! spherical standard normal, so the KL term has the closed form
//! `½(σ² + μ² − 1 − log σ²)` summed over entries.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{softplus, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Variational,
    PointEstimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalTensor {
    shape: Vec<usize>,
    pub mean: Matrix,
    /// Unconstrained scale; `None` in point-estimate mode.
    pub rho: Option<Matrix>,
}

/// `ln σ` for `σ = softplus(rho)`, accurate for very negative `rho`.
#[inline]
pub fn log_sigma(rho: f64) -> f64 {
    if rho < -30.0 {
        rho
    } else {
        softplus(rho).ln()
    }
}

/// Rows × cols view of an arbitrary shape: the first axis is the row axis.
pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

impl VariationalTensor {
    pub fn variational(shape: &[usize], mean: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let (r, c) = matrix_dims(shape);
        if mean.len() != r * c || rho.len() != r * c {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {} values, got mean {} / rho {}",
                r * c,
                mean.len(),
                rho.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            mean: Matrix::from_vec(r, c, mean),
            rho: Some(Matrix::from_vec(r, c, rho)),
        })
    }

    pub fn point(shape: &[usize], mean: Vec<f64>) -> Result<Self> {
        let (r, c) = matrix_dims(shape);
        if mean.len() != r * c {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                r * c,
                mean.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            mean: Matrix::from_vec(r, c, mean),
            rho: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mode(&self) -> WeightMode {
        if self.rho.is_some() {
            WeightMode::Variational
        } else {
            WeightMode::PointEstimate
        }
    }

    pub fn sigma(&self) -> Option<Matrix> {
        self.rho.as_ref().map(|r| r.map(softplus))
    }

    /// Draw the Gaussian noise for one reparameterized sample.
    pub fn draw_noise(&self, rng: &mut RngStream) -> Option<Matrix> {
        self.rho.as_ref().map(|r| {
            let mut eps = Matrix::zeros(r.rows(), r.cols());
            eps.data_mut().iter_mut().for_each(|e| *e = rng.normal());
            eps
        })
    }

    /// `μ + softplus(ρ) ⊙ ε` for a given noise matrix.
    pub fn sample_with(&self, eps: Option<&Matrix>) -> Matrix {
        match (&self.rho, eps) {
            (Some(rho), Some(eps)) => {
                let mut out = self.mean.clone();
                for ((w, &r), &e) in out.data_mut().iter_mut().zip(rho.data()).zip(eps.data()) {
                    *w += softplus(r) * e;
                }
                out
            }
            _ => self.mean.clone(),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Matrix {
        let eps = self.draw_noise(rng);
        self.sample_with(eps.as_ref())
    }

    /// KL divergence to the standard normal prior.
    pub fn kl(&self) -> Result<f64> {
        let rho = self
            .rho
            .as_ref()
            .ok_or(Error::UnsupportedMode("KL of a point-estimate tensor"))?;
        Ok(kl_terms(self.mean.data(), rho.data()))
    }

    /// Kaiming-uniform initialization of both the mean and `rho`.
    pub fn init_kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::InvalidArgument("fan_in must be at least 1".into()));
        }
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let mean = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        let rho = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Self::variational(shape, mean, rho)
    }

    /// Xavier-normal initialized point estimate.
    pub fn init_xavier_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Result<Self> {
        if fan_in + fan_out == 0 {
            return Err(Error::InvalidArgument("fan_in + fan_out must be positive".into()));
        }
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let mean = (0..n).map(|_| std * rng.normal()).collect();
        Self::point(shape, mean)
    }

    pub fn constant(shape: &[usize], value: f64, mode: WeightMode, rho: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        match mode {
            WeightMode::PointEstimate => Self::point(shape, vec![value; n]),
            WeightMode::Variational => Self::variational(shape, vec![value; n], vec![rho; n]),
        }
    }

    /// Convert to point-estimate mode, dropping the scale.
    pub fn into_point(mut self) -> Self {
        self.rho = None;
        self
    }

    /// Round every stored value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        let round = |m: &mut Matrix| m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        round(&mut self.mean);
        if let Some(r) = self.rho.as_mut() {
            round(r);
        }
    }
}

/// Sum of `½(σ² + μ² − 1 − log σ²)` over paired `(μ, ρ)` entries.
pub fn kl_terms(mean: &[f64], rho: &[f64]) -> f64 {
    mean.iter()
        .zip(rho)
        .map(|(&m, &r)| {
            let s = softplus(r);
            0.5 * (s * s + m * m - 1.0) - log_sigma(r)
        })
        .sum()
}
