//! Posterior predictive moments under fitted hyperparameters, and the
//! evaluation metrics (MAE, MSE, RMSE, MESE, SDESE).

use nalgebra::{DMatrix, DVector};

use crate::kernel::{self, HyperParams};
use crate::lowrank::{self, NystromFactor};
use crate::{Error, Result};

/// Per-test-point Gaussian predictive distribution.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictiveMoments {
    pub mu_star: f64,
    /// Predictive variance including the noise term; floored at `sigma_eps2`
    /// (low-rank roundoff can push the epistemic part slightly negative).
    pub var_star: f64,
}

/// Metric scale tag: standardized (training z-scale) or original target units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricScale {
    Original,
    Standardized,
}

/// Point-accuracy and uncertainty metrics over a test set.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mese: f64,
    pub sdese: f64,
    pub n_test: usize,
    pub scale: MetricScale,
}

/// Reusable prediction state: the training solve `alpha = K_hat^{-1} y` is
/// computed once, each test point then costs one cross-kernel vector and one
/// low-rank solve.
pub struct Predictor<'a> {
    factor: &'a NystromFactor,
    theta: HyperParams,
    pts: kernel::RowMajor,
    train_sq: Vec<f64>,
    alpha: DVector<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(
        x_train: &DMatrix<f64>,
        y_train: &DVector<f64>,
        theta_hat: &HyperParams,
        factor: &'a NystromFactor,
    ) -> Result<Self> {
        if x_train.nrows() != factor.n() {
            return Err(Error::Input(format!(
                "factor was built for n = {}, design has {} rows",
                factor.n(),
                x_train.nrows()
            )));
        }
        if y_train.len() != x_train.nrows() {
            return Err(Error::Input(format!(
                "y has length {} but the design has {} rows",
                y_train.len(),
                x_train.nrows()
            )));
        }
        let pts = kernel::RowMajor::from(x_train);
        let train_sq: Vec<f64> =
            (0..pts.n).map(|i| pts.row(i).iter().map(|v| v * v).sum()).collect();
        let alpha = lowrank::lowrank_solve(factor, y_train)?;
        Ok(Self { factor, theta: *theta_hat, pts, train_sq, alpha })
    }

    /// Cross-kernel vector `k_star` and the prior variance `k_star_star`.
    fn kernel_vectors(&self, x_star: &[f64]) -> Result<(DVector<f64>, f64)> {
        if x_star.len() != self.pts.dim {
            return Err(Error::Input(format!(
                "test point has dimension {}, expected {}",
                x_star.len(),
                self.pts.dim
            )));
        }
        let star_sq: f64 = x_star.iter().map(|v| v * v).sum();
        let k_star = DVector::from_fn(self.pts.n, |i, _| {
            let xxp: f64 = self.pts.row(i).iter().zip(x_star).map(|(u, v)| u * v).sum();
            kernel::kmix_from_products(self.train_sq[i], star_sq, xxp, &self.theta)
        });
        let k_ss = kernel::kmix_from_products(star_sq, star_sq, star_sq, &self.theta);
        Ok((k_star, k_ss))
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<PredictiveMoments> {
        let (k_star, k_ss) = self.kernel_vectors(x_star)?;
        Ok(moments_from_kernel_vectors(self.factor, &self.alpha, &k_star, k_ss))
    }

    pub fn predict_all(&self, x_test: &DMatrix<f64>) -> Result<Vec<PredictiveMoments>> {
        let mut out = Vec::with_capacity(x_test.nrows());
        let mut buf = vec![0.0f64; x_test.ncols()];
        for i in 0..x_test.nrows() {
            for d in 0..x_test.ncols() {
                buf[d] = x_test[(i, d)];
            }
            out.push(self.predict(&buf)?);
        }
        Ok(out)
    }
}

/// `mu = k_star' alpha`, `var = k_ss - k_star' K_hat^{-1} k_star + sigma_eps2`,
/// floored at `sigma_eps2`.
pub(crate) fn moments_from_kernel_vectors(
    factor: &NystromFactor,
    alpha: &DVector<f64>,
    k_star: &DVector<f64>,
    k_ss: f64,
) -> PredictiveMoments {
    let mu_star = k_star.dot(alpha);
    let v = lowrank::lowrank_solve(factor, k_star).expect("k_star has factor length");
    let var_star = (k_ss - k_star.dot(&v) + factor.sigma_eps2).max(factor.sigma_eps2);
    PredictiveMoments { mu_star, var_star }
}

/// One-shot predictive moments at a single test point.
pub fn predictive_moments(
    x_star: &[f64],
    x_train: &DMatrix<f64>,
    y_train: &DVector<f64>,
    theta_hat: &HyperParams,
    factor: &NystromFactor,
) -> Result<PredictiveMoments> {
    Predictor::new(x_train, y_train, theta_hat, factor)?.predict(x_star)
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = v - comp;
        let next = sum + t;
        comp = (next - sum) - t;
        sum = next;
    }
    sum
}

/// Test-set metrics in fixed input order with compensated summation.
/// `MESE = MSE + mean predictive variance` holds exactly by construction;
/// `SDESE` uses the sample (n-1) standard deviation of the per-point expected
/// squared errors `(mu_i - y_i)^2 + var_i`.
pub fn compute_metrics(
    preds: &[PredictiveMoments],
    y_true: &DVector<f64>,
    scale: MetricScale,
) -> Result<MetricsReport> {
    let n = preds.len();
    if n != y_true.len() {
        return Err(Error::Input(format!(
            "{} predictions against {} targets",
            n,
            y_true.len()
        )));
    }
    if n < 2 {
        return Err(Error::Input("need at least 2 test points for SDESE".into()));
    }
    let nf = n as f64;
    let mae = kahan_sum(preds.iter().zip(y_true.iter()).map(|(p, y)| (p.mu_star - y).abs())) / nf;
    let mse = kahan_sum(
        preds.iter().zip(y_true.iter()).map(|(p, y)| (p.mu_star - y) * (p.mu_star - y)),
    ) / nf;
    let mean_var = kahan_sum(preds.iter().map(|p| p.var_star)) / nf;
    let mese = mse + mean_var;
    let sdese = {
        let dev = preds.iter().zip(y_true.iter()).map(|(p, y)| {
            let ese = (p.mu_star - y) * (p.mu_star - y) + p.var_star;
            (ese - mese) * (ese - mese)
        });
        (kahan_sum(dev) / (nf - 1.0)).sqrt()
    };
    Ok(MetricsReport { mae, mse, rmse: mse.sqrt(), mese, sdese, n_test: n, scale })
}
