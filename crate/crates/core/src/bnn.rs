//! Finite-width Monte-Carlo BNN sampler.
//!
//! Draws functions from the shallow-network prior
//! `f(x) = b + sum_m sqrt(w_m) sum_j v_j^(m) h_m(a_j + u_j' x)` and compares
//! their empirical covariance against the analytic limit kernels. ReLU and
//! LeakyReLU targets are exact closed forms; the tanh/sigmoid targets carry
//! the erf-approximation bias of the arcsine formulas, so their comparison
//! tolerances are looser.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::kernel::{self, HyperParams, PreactMoments};
use crate::{Error, Result};

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(alpha) => z.max(alpha * z),
        }
    }

    /// The matching infinite-width kernel component `E[h(Z) h(Z')]`.
    fn limit_kernel(self, m: &PreactMoments) -> f64 {
        match self {
            Activation::Tanh => kernel::k_tanh(m),
            Activation::Sigmoid => kernel::k_sigmoid(m),
            Activation::Relu => kernel::k_relu(m),
            Activation::LeakyRelu(alpha) => kernel::k_leaky_relu(m, alpha),
        }
    }
}

/// Finite-width sampler specification. `theta.sigma_eps2` is unused: the
/// sampler draws noiseless function values.
#[derive(Clone, Debug)]
pub struct BnnSpec {
    pub hidden_width: usize,
    pub activations: Vec<Activation>,
    /// Mixture weights, summing to 1.
    pub weights: Vec<f64>,
    pub theta: HyperParams,
    pub n_samples: usize,
    pub seed: u64,
}

impl BnnSpec {
    /// Single-activation network with full weight on that component.
    pub fn single(activation: Activation, theta: HyperParams, hidden_width: usize, n_samples: usize, seed: u64) -> Self {
        Self { hidden_width, activations: vec![activation], weights: vec![1.0], theta, n_samples, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Input("hidden width must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Input("n_samples must be >= 1".into()));
        }
        if self.activations.is_empty() || self.activations.len() != self.weights.len() {
            return Err(Error::Input(
                "activations must be nonempty and match the weight count".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Input(format!("mixture weights must sum to 1, got {total}")));
        }
        for a in &self.activations {
            if let Activation::LeakyRelu(alpha) = a {
                if !(alpha.is_finite() && (0.0..=1.0).contains(alpha)) {
                    return Err(Error::Input(format!("leaky slope {alpha} out of [0,1]")));
                }
            }
        }
        let t = &self.theta;
        let ok = t.sigma_a2 > 0.0
            && t.sigma_u2 > 0.0
            && t.sigma_b2 >= 0.0
            && t.sigma_v2 >= 0.0
            && [t.sigma_a2, t.sigma_u2, t.sigma_b2, t.sigma_v2].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Parameter(
                "sampler needs sigma_a2, sigma_u2 > 0 and nonnegative sigma_b2, sigma_v2".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `n_samples` functions at the rows of `x_centered`; returns an
/// `n_samples x n` matrix. Each draw uses its own counter-derived stream, so
/// the output is deterministic per seed and independent of evaluation order.
pub fn sample_bnn(spec: &BnnSpec, x_centered: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = x_centered.nrows();
    let dim = x_centered.ncols();
    if n == 0 || dim == 0 {
        return Err(Error::Input("probe design must be non-empty".into()));
    }
    let pts = kernel::RowMajor::from(x_centered);
    let h = spec.hidden_width;
    let sd_a = spec.theta.sigma_a2.sqrt();
    let sd_u = spec.theta.sigma_u2.sqrt();
    let sd_v = (spec.theta.sigma_v2 / h as f64).sqrt();
    let sd_b = spec.theta.sigma_b2.sqrt();
    let sqrt_w: Vec<f64> = spec.weights.iter().map(|w| w.sqrt()).collect();

    let mut out = DMatrix::<f64>::zeros(spec.n_samples, n);
    let mut u_row = vec![0.0f64; dim];
    let mut z_row = vec![0.0f64; n];
    let mut f_row = vec![0.0f64; n];
    for draw in 0..spec.n_samples {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        rng.set_stream(draw as u64 + 1);
        f_row.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..h {
            let a: f64 = sd_a * rng.sample::<f64, _>(StandardNormal);
            for u in u_row.iter_mut() {
                *u = sd_u * rng.sample::<f64, _>(StandardNormal);
            }
            for (p, z) in z_row.iter_mut().enumerate() {
                let dot: f64 = pts.row(p).iter().zip(&u_row).map(|(x, u)| x * u).sum();
                *z = a + dot;
            }
            for (m, &act) in spec.activations.iter().enumerate() {
                let v: f64 = sd_v * rng.sample::<f64, _>(StandardNormal);
                let scale = sqrt_w[m] * v;
                for (f, &z) in f_row.iter_mut().zip(&z_row) {
                    *f += scale * act.apply(z);
                }
            }
        }
        let b: f64 = sd_b * rng.sample::<f64, _>(StandardNormal);
        for (p, &f) in f_row.iter().enumerate() {
            out[(draw, p)] = f + b;
        }
    }
    Ok(out)
}

/// Unbiased sample covariance of the draws (mean subtracted, n_samples - 1
/// denominator); symmetric by construction.
pub fn empirical_kernel(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ns = samples.nrows();
    if ns < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {ns}")));
    }
    let n = samples.ncols();
    let mut means = DVector::<f64>::zeros(n);
    for p in 0..n {
        means[p] = samples.column(p).sum() / ns as f64;
    }
    let mut centered = samples.clone();
    for p in 0..n {
        for s in 0..ns {
            centered[(s, p)] -= means[p];
        }
    }
    Ok(centered.transpose() * centered / (ns as f64 - 1.0))
}

/// Analytic limit kernel of the mixture:
/// `sigma_b2 + sigma_v2 sum_m w_m K_m(x, x')`.
pub fn analytic_kernel(spec: &BnnSpec, x_centered: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = x_centered.nrows();
    let pts = kernel::RowMajor::from(x_centered);
    let t = &spec.theta;
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let m = kernel::preactivation_moments(pts.row(i), pts.row(j), t.sigma_a2, t.sigma_u2)?;
            let mix: f64 = spec
                .activations
                .iter()
                .zip(&spec.weights)
                .map(|(act, w)| w * act.limit_kernel(&m))
                .sum();
            let v = t.sigma_b2 + t.sigma_v2 * mix;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// One row of a width-convergence report.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ConvergenceRow {
    pub hidden_width: usize,
    pub n_samples: usize,
    pub probe_set_id: String,
    pub max_abs_error: f64,
}

/// Max-abs deviation of the empirical covariance from the analytic mixture
/// kernel, per hidden width in `h_grid` (same seed and sample count per row).
pub fn width_convergence_report(
    spec: &BnnSpec,
    h_grid: &[usize],
    x_probe: &DMatrix<f64>,
    probe_set_id: &str,
) -> Result<Vec<ConvergenceRow>> {
    let target = analytic_kernel(spec, x_probe)?;
    let mut rows = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let mut s = spec.clone();
        s.hidden_width = h;
        let samples = sample_bnn(&s, x_probe)?;
        let emp = empirical_kernel(&samples)?;
        let max_abs_error = (&emp - &target).abs().max();
        rows.push(ConvergenceRow {
            hidden_width: h,
            n_samples: spec.n_samples,
            probe_set_id: probe_set_id.to_owned(),
            max_abs_error,
        });
    }
    Ok(rows)
}

/// Writes a convergence report as CSV
/// (`H, n_samples, probe_set_id, max_abs_error`).
pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    writeln!(file, "H,n_samples,probe_set_id,max_abs_error")
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        writeln!(file, "{},{},{},{}", r.hidden_width, r.n_samples, r.probe_set_id, r.max_abs_error)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn probe_design(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, dim, |_, _| rng.random::<f64>() - 0.5)
    }

    /// Simpson-rule quadrature of `E[g(Z)]`, `Z ~ N(0, var)`.
    fn gaussian_expectation(g: impl Fn(f64) -> f64, var: f64) -> f64 {
        let sd = var.sqrt();
        let (lo, hi) = (-10.0 * sd, 10.0 * sd);
        let steps = 4000;
        let h = (hi - lo) / steps as f64;
        let density =
            |z: f64| (-z * z / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let mut total = 0.0;
        for k in 0..steps {
            let a = lo + k as f64 * h;
            let mid = a + 0.5 * h;
            let b = a + h;
            total += h / 6.0
                * (g(a) * density(a) + 4.0 * g(mid) * density(mid) + g(b) * density(b));
        }
        total
    }

    #[test]
    fn zero_output_scales_give_zero_functions() {
        let theta = HyperParams::new_unchecked(1.0, 1.0, 1.0, 0.0, 0.0, 0.5, 0.5);
        let spec = BnnSpec::single(Activation::Tanh, theta, 8, 20, 1);
        let x = probe_design(4, 3, 0);
        let samples = sample_bnn(&spec, &x).unwrap();
        assert!(samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = BnnSpec::single(Activation::Relu, HyperParams::unit(), 16, 10, 3);
        let x = probe_design(3, 2, 1);
        assert_eq!(sample_bnn(&spec, &x).unwrap(), sample_bnn(&spec, &x).unwrap());
    }

    #[test]
    fn width_one_tanh_variance_matches_quadrature() {
        // Var f(0) = sigma_b2 + sigma_v2 E[tanh(Z)^2], Z ~ N(0, sigma_a2)
        let theta = HyperParams::unit();
        let spec = BnnSpec::single(Activation::Tanh, theta, 1, 200_000, 11);
        let x = DMatrix::<f64>::zeros(1, 2);
        let samples = sample_bnn(&spec, &x).unwrap();
        let emp = empirical_kernel(&samples).unwrap()[(0, 0)];
        let expect = 1.0 + gaussian_expectation(|z| z.tanh() * z.tanh(), 1.0);
        assert!((emp - expect).abs() < 0.02, "empirical {emp} vs quadrature {expect}");
    }

    #[test]
    fn relu_marginal_variance_identity() {
        // E[ReLU(Z)^2] = var(Z)/2, so Var f(x) = sigma_b2 + sigma_v2 sz2 / 2
        let theta = HyperParams::unit();
        let spec = BnnSpec::single(Activation::Relu, theta, 16, 50_000, 21);
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.4]);
        let sz2 = 1.0 + 0.25;
        let expect = 1.0 + sz2 / 2.0;
        let samples = sample_bnn(&spec, &x).unwrap();
        let emp = empirical_kernel(&samples).unwrap()[(0, 0)];
        assert!((emp - expect).abs() < 0.05, "empirical {emp} vs analytic {expect}");
    }

    #[test]
    fn sample_means_are_centered() {
        let spec = BnnSpec::single(Activation::Relu, HyperParams::unit(), 50, 20_000, 7);
        let x = probe_design(5, 3, 2);
        let samples = sample_bnn(&spec, &x).unwrap();
        let ns = samples.nrows() as f64;
        for p in 0..5 {
            let mean = samples.column(p).sum() / ns;
            let var = samples.column(p).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (ns - 1.0);
            assert!(
                mean.abs() <= 3.0 * (var / ns).sqrt(),
                "probe {p}: mean {mean} too far from zero"
            );
        }
    }

    #[test]
    fn independent_blocks_are_uncorrelated() {
        let x = probe_design(1, 3, 5);
        let s1 = BnnSpec::single(Activation::Tanh, HyperParams::unit(), 32, 20_000, 100);
        let s2 = BnnSpec::single(Activation::LeakyRelu(0.3), HyperParams::unit(), 32, 20_000, 200);
        let f1 = sample_bnn(&s1, &x).unwrap();
        let f2 = sample_bnn(&s2, &x).unwrap();
        let ns = f1.nrows() as f64;
        let m1 = f1.column(0).sum() / ns;
        let m2 = f2.column(0).sum() / ns;
        let cov = f1
            .column(0)
            .iter()
            .zip(f2.column(0).iter())
            .map(|(a, b)| (a - m1) * (b - m2))
            .sum::<f64>()
            / (ns - 1.0);
        assert!(cov.abs() <= 3.0 / ns.sqrt(), "cross-covariance {cov}");
    }

    #[test]
    fn empirical_kernel_edge_cases() {
        let constant = DMatrix::from_element(10, 3, 1.7);
        let k = empirical_kernel(&constant).unwrap();
        assert!(k.iter().all(|&v| v.abs() < 1e-12));
        let single = DMatrix::from_element(1, 3, 0.0);
        assert!(empirical_kernel(&single).is_err());
    }

    #[test]
    fn relu_network_approaches_limit_kernel() {
        // small smoke version of the width-convergence check
        let x = probe_design(3, 3, 9);
        let spec = BnnSpec::single(Activation::Relu, HyperParams::unit(), 2000, 4000, 13);
        let rows = width_convergence_report(&spec, &[2000], &x, "smoke").unwrap();
        assert!(rows[0].max_abs_error <= 0.1, "error {}", rows[0].max_abs_error);
    }

    #[test]
    fn mixture_spec_validation() {
        let theta = HyperParams::unit();
        let bad = BnnSpec {
            hidden_width: 4,
            activations: vec![Activation::Tanh, Activation::Relu],
            weights: vec![0.5, 0.4],
            theta,
            n_samples: 3,
            seed: 0,
        };
        assert!(bad.validate().is_err());
        let good = BnnSpec {
            activations: vec![Activation::Tanh, Activation::LeakyRelu(0.5)],
            weights: vec![0.5, 0.5],
            ..bad
        };
        assert!(good.validate().is_ok());
    }

    #[test]
    fn convergence_rows_are_deterministic_and_csv_written() {
        let x = probe_design(3, 2, 4);
        let spec = BnnSpec::single(Activation::Relu, HyperParams::unit(), 100, 500, 17);
        let r1 = width_convergence_report(&spec, &[10, 100], &x, "p0").unwrap();
        let r2 = width_convergence_report(&spec, &[10, 100], &x, "p0").unwrap();
        assert_eq!(r1.len(), 2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_relative_eq!(a.max_abs_error, b.max_abs_error);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.csv");
        write_convergence_csv(&path, &r1).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("H,n_samples,probe_set_id,max_abs_error"));
        assert_eq!(text.lines().count(), 3);
    }
}
