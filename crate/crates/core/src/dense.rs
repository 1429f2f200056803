//! Exact dense-Cholesky GP reference for small n.
//!
//! This is the oracle path used by the test suites to pin down the low-rank
//! algebra, and a perfectly serviceable exact implementation when `n` is a few
//! hundred. It never touches the [`crate::lowrank`] machinery.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::kernel::{self, HyperParams};
use crate::{Error, Result};

/// Exact GP posterior machinery built from a dense Cholesky of `K + sigma_eps2 I`.
pub struct DenseGp {
    chol: Cholesky<f64, Dyn>,
    sigma_eps2: f64,
    n: usize,
}

impl DenseGp {
    pub fn build(x: &DMatrix<f64>, theta: &HyperParams) -> Result<Self> {
        theta.validate_interior()?;
        let km = kernel::kernel_matrix(x, theta)?;
        let n = km.n;
        let mut noisy = km.values;
        for i in 0..n {
            noisy[(i, i)] += theta.sigma_eps2;
        }
        let chol = Cholesky::new(noisy).ok_or_else(|| {
            Error::Numeric("dense Cholesky of the noisy kernel matrix failed".into())
        })?;
        Ok(Self { chol, sigma_eps2: theta.sigma_eps2, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `(K + sigma_eps2 I)^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Negative log marginal likelihood of `y` under the zero-mean GP.
    pub fn nll(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.n {
            return Err(Error::Input(format!("y has length {}, expected {}", y.len(), self.n)));
        }
        let alpha = self.solve(y);
        Ok(0.5 * y.dot(&alpha)
            + 0.5 * self.logdet()
            + 0.5 * self.n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Exact predictive mean and variance at one test point, given the training
    /// design used to build this factor.
    pub fn predictive_moments(
        &self,
        x_train: &DMatrix<f64>,
        y_train: &DVector<f64>,
        x_star: &[f64],
        theta: &HyperParams,
    ) -> Result<(f64, f64)> {
        if x_star.len() != x_train.ncols() {
            return Err(Error::Input(format!(
                "test point has dimension {}, expected {}",
                x_star.len(),
                x_train.ncols()
            )));
        }
        let n = x_train.nrows();
        let mut k_star = DVector::<f64>::zeros(n);
        for i in 0..n {
            let xi: Vec<f64> = x_train.row(i).iter().cloned().collect();
            k_star[i] = kernel::k_mix(&xi, x_star, theta)?;
        }
        let k_ss = kernel::k_mix(x_star, x_star, theta)?;
        let alpha = self.solve(y_train);
        let v = self.solve(&k_star);
        let mu = k_star.dot(&alpha);
        let var = k_ss - k_star.dot(&v) + self.sigma_eps2;
        Ok((mu, var))
    }
}

/// Exact Gaussian conditional of component `target` given the components
/// `given` (with observed values `f_given`), for a joint zero-mean covariance
/// `k`. Returns `(mean, variance)`.
pub fn gaussian_conditional(
    k: &DMatrix<f64>,
    target: usize,
    given: &[usize],
    f_given: &DVector<f64>,
) -> Result<(f64, f64)> {
    if f_given.len() != given.len() {
        return Err(Error::Input("conditioning values and index set differ in length".into()));
    }
    if given.is_empty() {
        return Ok((0.0, k[(target, target)]));
    }
    let m = given.len();
    let mut k_nn = DMatrix::<f64>::zeros(m, m);
    let mut k_tn = DVector::<f64>::zeros(m);
    for (a, &i) in given.iter().enumerate() {
        k_tn[a] = k[(target, i)];
        for (b, &j) in given.iter().enumerate() {
            k_nn[(a, b)] = k[(i, j)];
        }
    }
    let chol = Cholesky::new(k_nn)
        .ok_or_else(|| Error::Numeric("conditioning block is not positive definite".into()))?;
    let sol = chol.solve(&k_tn);
    let mean = sol.dot(f_given);
    let var = k[(target, target)] - sol.dot(&k_tn);
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_nll_matches_gaussian_density() {
        // n = 1 with nearly-zero kernel: K_hat ~ sigma_eps2 = v, y = c
        let theta = HyperParams::new_unchecked(0.7, 1.0, 1.0, 1e-18, 1e-18, 0.5, 0.5);
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let gp = DenseGp::build(&x, &theta).unwrap();
        let c = 1.3;
        let y = DVector::from_vec(vec![c]);
        let v = 0.7f64;
        let expect = c * c / (2.0 * v) + 0.5 * v.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(gp.nll(&y).unwrap(), expect, max_relative = 1e-10);
    }

    #[test]
    fn conditional_with_empty_set_is_prior() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (m, v) = gaussian_conditional(&k, 0, &[], &DVector::zeros(0)).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn conditional_matches_bivariate_formula() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.5]);
        let f1 = 0.9;
        let (m, v) = gaussian_conditional(&k, 0, &[1], &DVector::from_vec(vec![f1])).unwrap();
        assert_relative_eq!(m, 0.6 / 1.5 * f1, max_relative = 1e-14);
        assert_relative_eq!(v, 2.0 - 0.6 * 0.6 / 1.5, max_relative = 1e-14);
    }
}
