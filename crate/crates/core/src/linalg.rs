//! Small dense Gaussian and inverse-gamma helpers shared by the sampler,
//! the marginal-likelihood code and the GLS estimator.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian written in canonical form: precision `Q` and mean `Q⁻¹ h`.
#[derive(Debug, Clone)]
pub struct GaussianPrecision {
    pub mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianPrecision {
    pub fn new(precision: DMatrix<f64>, rhs: &DVector<f64>, block: &str) -> Result<Self> {
        let chol = Cholesky::new(precision).ok_or_else(|| Error::NotPositiveDefinite {
            block: block.to_string(),
        })?;
        let mean = chol.solve(rhs);
        Ok(GaussianPrecision { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    /// log |Q|
    pub fn log_det_precision(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.dim();
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Q = L Lᵀ, so Lᵀ x = z gives Cov(x) = Q⁻¹.
        let lt = self.chol.l().transpose();
        let x = lt
            .solve_upper_triangular(&z)
            .expect("cholesky factor has a positive diagonal");
        &self.mean + x
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let k = self.dim() as f64;
        let diff = x - &self.mean;
        let l = self.chol.l();
        let u = l.transpose() * &diff;
        -0.5 * k * LN_2PI + 0.5 * self.log_det_precision() - 0.5 * u.norm_squared()
    }
}

/// Inverse-gamma with density ∝ x^{-(shape+1)} exp(-rate/x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InvGamma {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(Error::Domain(format!(
                "inverse gamma needs positive shape and rate, got ({shape}, {rate})"
            )));
        }
        Ok(InvGamma { shape, rate })
    }

    /// The `InvGam(a/2, b/2)` form used for every variance prior.
    pub fn from_half(a: f64, b: f64) -> Result<Self> {
        Self::new(0.5 * a, 0.5 * b)
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }

    pub fn variance(&self) -> Option<f64> {
        (self.shape > 2.0).then(|| {
            let m = self.rate / (self.shape - 1.0);
            m * m / (self.shape - 2.0)
        })
    }

    pub fn mode(&self) -> f64 {
        self.rate / (self.shape + 1.0)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln()
            - self.rate / x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("validated parameters");
        1.0 / g.sample(rng)
    }
}

pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// log Σ exp(xᵢ) − log n, evaluated without overflow.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln() - (xs.len() as f64).ln()
}

/// Select columns of a matrix.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

/// Type-7 (linear interpolation) empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
