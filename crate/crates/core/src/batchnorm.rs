//! Batch normalization state and the normalization kernel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;

/// Which statistics normalize the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch; they are written back into the state.
    BatchStats,
    /// The stored `mu`/`sigma` are used unchanged.
    StoredStats,
}

/// Per-feature normalization statistics `(mu, sigma)` and affine transform
/// `(gamma, beta)` of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T: Scalar = f32> {
    mu: Vec<T>,
    sigma: Vec<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(mu: Vec<T>, sigma: Vec<T>, gamma: Vec<T>, beta: Vec<T>) -> Result<Self> {
        let dim = mu.len();
        if sigma.len() != dim || gamma.len() != dim || beta.len() != dim {
            return Err(Error::dim(
                "BnState::new",
                format!("four vectors of length {dim}"),
                format!(
                    "lengths {}/{}/{}/{}",
                    dim,
                    sigma.len(),
                    gamma.len(),
                    beta.len()
                ),
            ));
        }
        if let Some(bad) = sigma.iter().find(|s| (**s).partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) || !s.is_finite()) {
            return Err(Error::Numeric(format!("sigma must be positive, got {bad}")));
        }
        Ok(Self {
            mu,
            sigma,
            gamma,
            beta,
        })
    }

    /// `mu = 0, sigma = 1, gamma = 1, beta = 0`.
    pub fn identity(dim: usize) -> Self {
        Self {
            mu: vec![T::zero(); dim],
            sigma: vec![T::one(); dim],
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn beta(&self) -> &[T] {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut [T] {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut [T] {
        &mut self.beta
    }

    /// Replaces the normalization statistics, keeping the affine transform.
    pub fn set_stats(&mut self, mu: Vec<T>, sigma: Vec<T>) -> Result<()> {
        let next = Self::new(mu, sigma, self.gamma.clone(), self.beta.clone())?;
        *self = next;
        Ok(())
    }

    /// The four component vectors in `(mu, sigma, gamma, beta)` order.
    pub fn components(&self) -> [&[T]; 4] {
        [&self.mu, &self.sigma, &self.gamma, &self.beta]
    }

    pub(crate) fn components_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.mu, &mut self.sigma, &mut self.gamma, &mut self.beta]
    }

    /// Largest absolute componentwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.components()
            .iter()
            .zip(other.components())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()))
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> BnState<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect()
        };
        BnState {
            mu: conv(&self.mu),
            sigma: conv(&self.sigma),
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
        }
    }
}

/// Column mean and biased standard deviation `sqrt(var + eps)`.
pub fn batch_statistics<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if x.rows() < 2 {
        return Err(Error::BatchTooSmall { rows: x.rows() });
    }
    let n = T::lit(x.rows() as f64);
    let mu: Vec<T> = x.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![T::zero(); x.cols()];
    for row in x.iter_rows() {
        for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mu) {
            let d = xi - m;
            *v = *v + d * d;
        }
    }
    let eps = T::lit(BN_EPS);
    let sigma = var.into_iter().map(|v| (v / n + eps).sqrt()).collect();
    Ok((mu, sigma))
}

/// Normalized activations `(x - mu) / sigma` together with the affine output.
pub(crate) fn normalize<T: Scalar>(
    x: &Tensor<T>,
    bn: &mut BnState<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.cols() != bn.dim() {
        return Err(Error::dim("batchnorm_forward", bn.dim(), x.cols()));
    }
    if mode == BnMode::BatchStats {
        let (mu, sigma) = batch_statistics(x)?;
        bn.mu = mu;
        bn.sigma = sigma;
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    let d = bn.dim();
    for (xr, yr) in xhat
        .data_mut()
        .chunks_exact_mut(d.max(1))
        .zip(y.data_mut().chunks_exact_mut(d.max(1)))
    {
        for j in 0..d {
            let h = (xr[j] - bn.mu[j]) / bn.sigma[j];
            xr[j] = h;
            yr[j] = bn.gamma[j] * h + bn.beta[j];
        }
    }
    Ok((xhat, y))
}

/// `y = gamma · (x - mu) / sigma + beta`, per column.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    bn: &mut BnState<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    normalize(x, bn, mode).map(|(_, y)| y)
}
