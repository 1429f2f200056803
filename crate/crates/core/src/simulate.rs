//! Input-design generation, automatic nugget calibration, and Vecchia-type GP
//! sampling for the benchmark scenarios.
//!
//! Designs live on `[0,1]^I` and are centered to `[-0.5, 0.5]^I` before any
//! kernel evaluation. The latent field is drawn with an exact Cholesky block
//! for the first `n_init` points and a sequential univariate conditional on
//! the nearest previously sampled points afterwards; observation noise is
//! drawn from an independent seed stream so a latent draw can be reused across
//! nugget settings.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::kernel::{self, HyperParams};
use crate::lowrank::cholesky_with_jitter;
use crate::{Error, Result};

const STREAM_DESIGN: u64 = 1;
const STREAM_STRATA: u64 = 2;
const STREAM_LATENT: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Input-design family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Uniform,
    Stratified,
}

/// Specification of a synthetic input design on `[0,1]^I`.
#[derive(Clone, Debug)]
pub struct DesignSpec {
    pub n: usize,
    pub dim: usize,
    pub design: DesignKind,
    pub seed: u64,
    /// Radial shell count for the stratified design.
    pub radial_shells: usize,
    /// Angular stratum count for the stratified design.
    pub angular_strata: usize,
}

impl DesignSpec {
    pub fn uniform(n: usize, dim: usize, seed: u64) -> Self {
        Self { n, dim, design: DesignKind::Uniform, seed, radial_shells: 10, angular_strata: 0 }
    }

    /// Stratified defaults: 10 radial shells, `2^min(I, 6)` angular strata.
    pub fn stratified(n: usize, dim: usize, seed: u64) -> Self {
        Self {
            n,
            dim,
            design: DesignKind::Stratified,
            seed,
            radial_shells: 10,
            angular_strata: 1usize << dim.min(6),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::Input(format!(
                "design needs n >= 1 and I >= 1, got ({}, {})",
                self.n, self.dim
            )));
        }
        if self.design == DesignKind::Stratified
            && (self.radial_shells == 0 || self.angular_strata == 0)
        {
            return Err(Error::Input("stratified design needs positive shell and stratum counts".into()));
        }
        Ok(())
    }
}

/// Generates a design on `[0,1]^I`, deterministic per seed.
///
/// Uniform: i.i.d. uniform coordinates. Stratified: directions are drawn on
/// the unit sphere and folded into one of `angular_strata` random orthant
/// signatures (round-robin), the radius is drawn uniformly inside one of
/// `radial_shells` equal-probability shells of the centered-norm distribution
/// (shell edges estimated once per seed), and the point is clipped to the
/// hypercube.
pub fn generate_design(spec: &DesignSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    match spec.design {
        DesignKind::Uniform => {
            let mut rng = stream_rng(spec.seed, STREAM_DESIGN);
            Ok(DMatrix::from_fn(spec.n, spec.dim, |_, _| rng.random::<f64>()))
        }
        DesignKind::Stratified => generate_stratified(spec),
    }
}

fn generate_stratified(spec: &DesignSpec) -> Result<DMatrix<f64>> {
    let dim = spec.dim;
    let q_r = spec.radial_shells;
    let q_a = spec.angular_strata;

    // shell edges: empirical quantiles of ||x - 0.5|| under the uniform
    // design, with the exact extremes 0 and sqrt(I)/2 as outer edges
    let mut setup = stream_rng(spec.seed, STREAM_STRATA);
    let probes = 4096;
    let mut norms: Vec<f64> = (0..probes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let c: f64 = setup.random::<f64>() - 0.5;
                    c * c
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    let mut edges = Vec::with_capacity(q_r + 1);
    edges.push(0.0);
    for k in 1..q_r {
        edges.push(norms[(k * probes) / q_r]);
    }
    edges.push((dim as f64).sqrt() / 2.0);

    // one random orthant signature per angular stratum
    let signatures: Vec<Vec<f64>> = (0..q_a)
        .map(|_| (0..dim).map(|_| if setup.random::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect();

    let mut rng = stream_rng(spec.seed, STREAM_DESIGN);
    let mut x = DMatrix::<f64>::zeros(spec.n, dim);
    let mut direction = vec![0.0f64; dim];
    for t in 0..spec.n {
        let shell = rng.random_range(0..q_r);
        let radius = edges[shell] + (edges[shell + 1] - edges[shell]) * rng.random::<f64>();
        let mut norm2 = 0.0;
        for d in direction.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *d = g;
            norm2 += g * g;
        }
        let norm = norm2.sqrt().max(f64::MIN_POSITIVE);
        let signature = &signatures[t % q_a];
        for d in 0..dim {
            let centered = (radius * direction[d].abs() / norm * signature[d]).clamp(-0.5, 0.5);
            x[(t, d)] = centered + 0.5;
        }
    }
    Ok(x)
}

/// Centers a design: `x - 0.5` elementwise. Not idempotent.
pub fn center(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v - 0.5)
}

/// Nugget calibration `sigma_eps2 = eta * mean_i k_mix(x_i, x_i)`, with the
/// diagonal accumulated in fixed-size batches (the n x n matrix is never
/// formed).
pub fn calibrate_nugget(x_centered: &DMatrix<f64>, theta: &HyperParams, eta: f64) -> Result<f64> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Parameter(format!("eta must be a nonnegative fraction, got {eta}")));
    }
    let n = x_centered.nrows();
    if n == 0 || x_centered.ncols() == 0 {
        return Err(Error::Input("design matrix must be non-empty".into()));
    }
    let pts = kernel::RowMajor::from(x_centered);
    const BATCH: usize = 1024;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let mut batch_sum = 0.0;
        for i in start..end {
            let sq: f64 = pts.row(i).iter().map(|v| v * v).sum();
            batch_sum += kernel::kmix_from_products(sq, sq, sq, theta);
        }
        total += batch_sum;
        start = end;
    }
    Ok(eta * total / n as f64)
}

/// Configuration of the Vecchia-type sampler.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct VecchiaConfig {
    /// Size of the initial exact block.
    pub n_init: usize,
    /// Number of nearest previously-sampled neighbors per sequential step.
    pub n_neighbors: usize,
    pub seed: u64,
}

impl VecchiaConfig {
    pub fn new(seed: u64) -> Self {
        Self { n_init: 500, n_neighbors: 500, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.n_neighbors == 0 {
            return Err(Error::Input("n_init and n_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

fn validate_kernel_params(theta: &HyperParams) -> Result<()> {
    // sigma_eps2 plays no role in the latent draw; scenario truths may carry a
    // calibrated (possibly zero) nugget here
    let probe = HyperParams { sigma_eps2: 1.0, ..*theta };
    probe.validate_interior()
}

/// Nearest-neighbor selection among indices `< i`: the `m` smallest Euclidean
/// distances, ties broken by index, returned in ascending index order.
fn nearest_previous(
    pts: &kernel::RowMajor,
    i: usize,
    m: usize,
    dist_buf: &mut Vec<(f64, usize)>,
) -> Vec<usize> {
    dist_buf.clear();
    let xi = pts.row(i);
    for j in 0..i {
        let d2: f64 = xi.iter().zip(pts.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        dist_buf.push((d2, j));
    }
    if m < i {
        dist_buf.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist_buf.truncate(m);
    }
    let mut neighbors: Vec<usize> = dist_buf.iter().map(|&(_, j)| j).collect();
    neighbors.sort_unstable();
    neighbors
}

struct PairEval<'a> {
    pts: kernel::RowMajor,
    sq: Vec<f64>,
    theta: &'a HyperParams,
}

impl<'a> PairEval<'a> {
    fn new(x: &DMatrix<f64>, theta: &'a HyperParams) -> Self {
        let pts = kernel::RowMajor::from(x);
        let sq: Vec<f64> = (0..pts.n).map(|i| pts.row(i).iter().map(|v| v * v).sum()).collect();
        Self { pts, sq, theta }
    }

    fn k(&self, i: usize, j: usize) -> f64 {
        let xxp = self.pts.row(i).iter().zip(self.pts.row(j)).map(|(u, v)| u * v).sum();
        kernel::kmix_from_products(self.sq[i], self.sq[j], xxp, self.theta)
    }

    /// Conditional mean/variance of point `i` given the values `f` at the
    /// listed neighbors.
    fn conditional(&self, i: usize, neighbors: &[usize], f: &DVector<f64>) -> Result<(f64, f64)> {
        let m = neighbors.len();
        let mut k_nn = DMatrix::<f64>::zeros(m, m);
        let mut k_in = DVector::<f64>::zeros(m);
        for (a, &ja) in neighbors.iter().enumerate() {
            k_in[a] = self.k(i, ja);
            for (b, &jb) in neighbors.iter().enumerate().take(a + 1) {
                let v = self.k(ja, jb);
                k_nn[(a, b)] = v;
                k_nn[(b, a)] = v;
            }
        }
        let (chol, _) = cholesky_with_jitter(&k_nn)?;
        let sol = chol.solve(&k_in);
        let f_n = DVector::from_fn(m, |a, _| f[neighbors[a]]);
        Ok((sol.dot(&f_n), self.k(i, i) - sol.dot(&k_in)))
    }
}

/// Draws the latent field over the rows of `x_centered`: the first
/// `min(n, n_init)` points exactly via a dense factorization, every later
/// point from the univariate Gaussian conditional given its `n_neighbors`
/// nearest (Euclidean) previously sampled points. Deterministic per seed.
pub fn vecchia_sample(
    x_centered: &DMatrix<f64>,
    theta: &HyperParams,
    cfg: &VecchiaConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    validate_kernel_params(theta)?;
    let n = x_centered.nrows();
    if n == 0 || x_centered.ncols() == 0 {
        return Err(Error::Input("design matrix must be non-empty".into()));
    }
    let eval = PairEval::new(x_centered, theta);
    let mut rng = stream_rng(cfg.seed, STREAM_LATENT);
    let mut f = DVector::<f64>::zeros(n);

    // exact initial block
    let n0 = cfg.n_init.min(n);
    let mut k0 = DMatrix::<f64>::zeros(n0, n0);
    for i in 0..n0 {
        for j in 0..=i {
            let v = eval.k(i, j);
            k0[(i, j)] = v;
            k0[(j, i)] = v;
        }
    }
    let (chol, _) = cholesky_with_jitter(&k0)?;
    let z0 = DVector::from_fn(n0, |_, _| rng.sample(StandardNormal));
    let f0 = chol.l_dirty().lower_triangle() * z0;
    f.rows_mut(0, n0).copy_from(&f0);

    // sequential conditionals
    let mut dist_buf: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in n0..n {
        let m = cfg.n_neighbors.min(i);
        let neighbors = nearest_previous(&eval.pts, i, m, &mut dist_buf);
        let (mean, var) = eval.conditional(i, &neighbors, &f)?;
        let z: f64 = rng.sample(StandardNormal);
        f[i] = mean + var.max(0.0).sqrt() * z;
    }
    Ok(f)
}

/// Conditional moments the sequential sampler uses at step `i` (same neighbor
/// selection and algebra as [`vecchia_sample`], without drawing). Exposed for
/// the deterministic full-neighbor equivalence checks.
pub fn vecchia_step_moments(
    x_centered: &DMatrix<f64>,
    theta: &HyperParams,
    cfg: &VecchiaConfig,
    i: usize,
    f_prev: &DVector<f64>,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    validate_kernel_params(theta)?;
    let n = x_centered.nrows();
    if i >= n || f_prev.len() < i {
        return Err(Error::Input(format!("step index {i} out of range")));
    }
    let eval = PairEval::new(x_centered, theta);
    let mut dist_buf = Vec::with_capacity(i);
    let neighbors = nearest_previous(&eval.pts, i, cfg.n_neighbors.min(i), &mut dist_buf);
    eval.conditional(i, &neighbors, f_prev)
}

/// One row of the scenario grid: sampling design, input dimension, and size.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub name: String,
    pub design: DesignKind,
    pub dim: usize,
    pub n: usize,
}

/// The eight benchmark scenarios (uniform/stratified, I in {20, 80},
/// n in {10k, 20k, 50k}).
pub fn scenario_table(id: &str) -> Result<ScenarioSpec> {
    let (design, dim, n) = match id.to_ascii_uppercase().as_str() {
        "C1" => (DesignKind::Uniform, 20, 10_000),
        "C2" => (DesignKind::Uniform, 80, 10_000),
        "C3" => (DesignKind::Uniform, 20, 20_000),
        "C4" => (DesignKind::Uniform, 80, 20_000),
        "C5" => (DesignKind::Uniform, 20, 50_000),
        "C6" => (DesignKind::Uniform, 80, 50_000),
        "C7" => (DesignKind::Stratified, 20, 50_000),
        "C8" => (DesignKind::Stratified, 80, 50_000),
        other => return Err(Error::Input(format!("unknown scenario id '{other}'"))),
    };
    Ok(ScenarioSpec { name: id.to_ascii_uppercase(), design, dim, n })
}

/// Generation record persisted next to every scenario dataset.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub scenario: String,
    pub design: DesignKind,
    pub dim: usize,
    pub n: usize,
    pub scale: f64,
    pub seed: u64,
    pub eta: f64,
    pub sigma_eps2_true: f64,
    pub theta_true: HyperParams,
    pub n_init: usize,
    pub n_neighbors: usize,
}

/// A generated benchmark dataset.
#[derive(Clone, Debug)]
pub struct ScenarioDataset {
    /// Centered inputs in `[-0.5, 0.5]^I`.
    pub x_centered: DMatrix<f64>,
    /// Latent field.
    pub f: DVector<f64>,
    /// Observations `f + eps`.
    pub y: DVector<f64>,
    pub sigma_eps2_true: f64,
    pub theta_true: HyperParams,
    pub provenance: Provenance,
}

/// Generates a scenario dataset: design -> center -> calibrate nugget at the
/// unit kernel truth -> latent draw -> independent noise stream.
pub fn make_scenario(
    spec: &ScenarioSpec,
    scale: f64,
    eta: f64,
    seed: u64,
    vecchia: &VecchiaConfig,
) -> Result<ScenarioDataset> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Input(format!("scale must be > 0, got {scale}")));
    }
    let n = ((spec.n as f64 * scale).round() as usize).max(1);
    let design_spec = match spec.design {
        DesignKind::Uniform => DesignSpec::uniform(n, spec.dim, seed),
        DesignKind::Stratified => DesignSpec::stratified(n, spec.dim, seed),
    };
    let x = generate_design(&design_spec)?;
    let x_centered = center(&x);

    let mut theta_true = HyperParams::unit();
    let sigma_eps2_true = calibrate_nugget(&x_centered, &theta_true, eta)?;
    theta_true.sigma_eps2 = sigma_eps2_true;

    let cfg = VecchiaConfig { seed, ..*vecchia };
    let f = vecchia_sample(&x_centered, &theta_true, &cfg)?;

    let mut noise_rng = stream_rng(seed, STREAM_NOISE);
    let sd = sigma_eps2_true.sqrt();
    let y = DVector::from_fn(n, |i, _| {
        let z: f64 = noise_rng.sample(StandardNormal);
        f[i] + sd * z
    });

    let provenance = Provenance {
        scenario: spec.name.clone(),
        design: spec.design,
        dim: spec.dim,
        n,
        scale,
        seed,
        eta,
        sigma_eps2_true,
        theta_true,
        n_init: cfg.n_init,
        n_neighbors: cfg.n_neighbors,
    };
    Ok(ScenarioDataset { x_centered, f, y, sigma_eps2_true, theta_true, provenance })
}

/// Writes the dataset as CSV (`x_1..x_I, f, y`) plus a JSON provenance sidecar.
pub fn save_scenario(ds: &ScenarioDataset, csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(csv_path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", csv_path.display())))?;
    let dim = ds.x_centered.ncols();
    let mut header: Vec<String> = (1..=dim).map(|d| format!("x_{d}")).collect();
    header.push("f".into());
    header.push("y".into());
    wtr.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut record: Vec<String> = Vec::with_capacity(dim + 2);
    for i in 0..ds.x_centered.nrows() {
        record.clear();
        for d in 0..dim {
            record.push(format!("{}", ds.x_centered[(i, d)]));
        }
        record.push(format!("{}", ds.f[i]));
        record.push(format!("{}", ds.y[i]));
        wtr.write_record(&record).map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Data(e.to_string()))?;

    let json = serde_json::to_string_pretty(&ds.provenance)
        .map_err(|e| Error::Data(format!("provenance serialization failed: {e}")))?;
    let mut file = std::fs::File::create(json_path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", json_path.display())))?;
    file.write_all(json.as_bytes()).map_err(|e| Error::Data(e.to_string()))?;
    file.write_all(b"\n").map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Reads back a scenario CSV written by [`save_scenario`].
pub fn load_scenario_csv(path: &Path) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let table = crate::data::load_csv(path, "y")?;
    let f_col = table
        .feature_names
        .iter()
        .position(|h| h == "f")
        .ok_or_else(|| Error::Data(format!("{} has no 'f' column", path.display())))?;
    let n = table.features.nrows();
    let dim = table.features.ncols() - 1;
    let mut x = DMatrix::<f64>::zeros(n, dim);
    let mut f = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut d_out = 0;
        for d in 0..table.features.ncols() {
            if d == f_col {
                f[i] = table.features[(i, d)];
            } else {
                x[(i, d_out)] = table.features[(i, d)];
                d_out += 1;
            }
        }
    }
    Ok((x, f, table.target.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::gaussian_conditional;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_design_moments_and_bounds() {
        let spec = DesignSpec::uniform(10_000, 20, 3);
        let x = generate_design(&spec).unwrap();
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let xc = center(&x);
        let mean_sq: f64 =
            (0..10_000).map(|i| xc.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 1e4;
        let expect = 20.0 / 12.0;
        assert!(
            (mean_sq - expect).abs() / expect < 0.02,
            "mean ||x - 0.5||^2 = {mean_sq}, want ~{expect}"
        );
    }

    #[test]
    fn single_point_design() {
        let x = generate_design(&DesignSpec::uniform(1, 7, 0)).unwrap();
        assert_eq!((x.nrows(), x.ncols()), (1, 7));
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let xs = generate_design(&DesignSpec::stratified(1, 7, 0)).unwrap();
        assert_eq!((xs.nrows(), xs.ncols()), (1, 7));
        assert!(xs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn stratified_design_spreads_norms() {
        // paired-seed comparison of the sample variance of ||x - 0.5||^2
        for seed in [0u64, 7, 19] {
            let nu = generate_design(&DesignSpec::uniform(4000, 20, seed)).unwrap();
            let ns = generate_design(&DesignSpec::stratified(4000, 20, seed)).unwrap();
            let var_of = |x: &DMatrix<f64>| {
                let xc = center(x);
                let sq: Vec<f64> =
                    (0..xc.nrows()).map(|i| xc.row(i).iter().map(|v| v * v).sum()).collect();
                let m = sq.iter().sum::<f64>() / sq.len() as f64;
                sq.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (sq.len() - 1) as f64
            };
            let (vu, vs) = (var_of(&nu), var_of(&ns));
            assert!(vs > vu, "seed {seed}: stratified variance {vs} not above uniform {vu}");
        }
    }

    #[test]
    fn stratified_design_is_deterministic() {
        let a = generate_design(&DesignSpec::stratified(50, 5, 11)).unwrap();
        let b = generate_design(&DesignSpec::stratified(50, 5, 11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn center_behavior() {
        let x = DMatrix::from_element(2, 3, 0.5);
        assert_eq!(center(&x), DMatrix::zeros(2, 3));
        let bounds = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let c = center(&bounds);
        assert_eq!(c[(0, 0)], -0.5);
        assert_eq!(c[(0, 1)], 0.5);
        // centering twice keeps subtracting; it is not idempotent
        assert_eq!(center(&center(&x)), DMatrix::from_element(2, 3, -0.5));
    }

    #[test]
    fn nugget_is_linear_in_eta_and_zero_at_zero() {
        let x = center(&generate_design(&DesignSpec::uniform(200, 5, 1)).unwrap());
        let theta = HyperParams::unit();
        assert_eq!(calibrate_nugget(&x, &theta, 0.0).unwrap(), 0.0);
        let one = calibrate_nugget(&x, &theta, 0.04).unwrap();
        let two = calibrate_nugget(&x, &theta, 0.08).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn exact_block_reproduces_kernel_covariance() {
        // empirical covariance of repeated exact draws at 5 fixed points
        let x = center(&generate_design(&DesignSpec::uniform(5, 3, 9)).unwrap());
        let theta = HyperParams::unit();
        let k = kernel::kernel_matrix(&x, &theta).unwrap().values;
        let draws = 20_000u64;
        let mut sums = DMatrix::<f64>::zeros(5, 5);
        let mut means = DVector::<f64>::zeros(5);
        for rep in 0..draws {
            let cfg = VecchiaConfig { n_init: 5, n_neighbors: 5, seed: 1000 + rep };
            let f = vecchia_sample(&x, &theta, &cfg).unwrap();
            means += &f;
            sums += &f * f.transpose();
        }
        let nd = draws as f64;
        means /= nd;
        let cov = sums / (nd - 1.0) - (&means * means.transpose()) * nd / (nd - 1.0);
        let max_err = (&cov - &k).abs().max();
        assert!(max_err <= 0.05, "max |emp - analytic| = {max_err}");
    }

    #[test]
    fn full_neighbor_steps_match_dense_conditionals() {
        let n = 60;
        let x = center(&generate_design(&DesignSpec::uniform(n, 4, 5)).unwrap());
        let theta = HyperParams::unit();
        let cfg = VecchiaConfig { n_init: 10, n_neighbors: n, seed: 2 };
        let f = vecchia_sample(&x, &theta, &cfg).unwrap();
        let k = kernel::kernel_matrix(&x, &theta).unwrap().values;
        for i in [10usize, 25, 59] {
            let (mv, vv) = vecchia_step_moments(&x, &theta, &cfg, i, &f).unwrap();
            let given: Vec<usize> = (0..i).collect();
            let f_given = DVector::from_fn(i, |a, _| f[a]);
            let (md, vd) = gaussian_conditional(&k, i, &given, &f_given).unwrap();
            assert!((mv - md).abs() <= 1e-8, "step {i}: mean {mv} vs dense {md}");
            assert!((vv - vd).abs() <= 1e-8, "step {i}: var {vv} vs dense {vd}");
        }
    }

    #[test]
    fn near_zero_kernel_gives_near_zero_field() {
        let x = center(&generate_design(&DesignSpec::uniform(20, 3, 4)).unwrap());
        let theta = HyperParams::new_unchecked(0.1, 1.0, 1.0, 1e-28, 1e-28, 0.5, 0.5);
        let cfg = VecchiaConfig { n_init: 8, n_neighbors: 8, seed: 3 };
        let f = vecchia_sample(&x, &theta, &cfg).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn scenario_table_grid() {
        let c1 = scenario_table("C1").unwrap();
        assert_eq!((c1.design, c1.dim, c1.n), (DesignKind::Uniform, 20, 10_000));
        let c8 = scenario_table("c8").unwrap();
        assert_eq!((c8.design, c8.dim, c8.n), (DesignKind::Stratified, 80, 50_000));
        assert!(scenario_table("C9").is_err());
    }

    #[test]
    fn scenario_noise_matches_calibrated_nugget() {
        let spec = scenario_table("C1").unwrap();
        // scale 0.1 with a full-size exact block
        let cfg = VecchiaConfig { n_init: 1000, n_neighbors: 500, seed: 0 };
        let ds = make_scenario(&spec, 0.1, 0.04, 42, &cfg).unwrap();
        assert_eq!(ds.y.len(), 1000);
        assert!(ds.x_centered.iter().all(|&v| (-0.5..=0.5).contains(&v)));
        let eps = &ds.y - &ds.f;
        let mean = eps.sum() / 1000.0;
        let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 999.0;
        assert!(
            (var - ds.sigma_eps2_true).abs() / ds.sigma_eps2_true < 0.15,
            "noise variance {var} vs calibrated {}",
            ds.sigma_eps2_true
        );
        // independence of noise and field
        let fm = ds.f.sum() / 1000.0;
        let fv = ds.f.iter().map(|v| (v - fm) * (v - fm)).sum::<f64>() / 999.0;
        let cov = ds
            .f
            .iter()
            .zip(eps.iter())
            .map(|(a, b)| (a - fm) * (b - mean))
            .sum::<f64>()
            / 999.0;
        let corr = cov / (fv * var).sqrt();
        assert!(corr.abs() < 0.1, "latent/noise correlation {corr}");
    }

    #[test]
    fn eta_zero_emits_exact_field() {
        let spec = scenario_table("C1").unwrap();
        let cfg = VecchiaConfig { n_init: 100, n_neighbors: 100, seed: 7 };
        let ds = make_scenario(&spec, 0.01, 0.0, 7, &cfg).unwrap();
        assert_eq!(ds.y, ds.f);
        assert_eq!(ds.sigma_eps2_true, 0.0);
    }

    #[test]
    fn scenario_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("c1.csv");
        let json_path = dir.path().join("c1.json");
        let spec = scenario_table("C1").unwrap();
        let cfg = VecchiaConfig { n_init: 50, n_neighbors: 50, seed: 5 };
        let ds = make_scenario(&spec, 0.005, 0.04, 5, &cfg).unwrap();
        save_scenario(&ds, &csv_path, &json_path).unwrap();
        let (x, f, y) = load_scenario_csv(&csv_path).unwrap();
        assert_eq!(x, ds.x_centered);
        assert_eq!(f, ds.f);
        assert_eq!(y, ds.y);
        let json = std::fs::read_to_string(&json_path).unwrap();
        let prov: Provenance = serde_json::from_str(&json).unwrap();
        assert_eq!(prov.scenario, "C1");
        assert_eq!(prov.n, 50);
        assert_relative_eq!(prov.sigma_eps2_true, ds.sigma_eps2_true);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = scenario_table("C2").unwrap();
        let cfg = VecchiaConfig { n_init: 40, n_neighbors: 40, seed: 9 };
        let mut bytes = Vec::new();
        for run in 0..2 {
            let csv_path = dir.path().join(format!("run{run}.csv"));
            let json_path = dir.path().join(format!("run{run}.json"));
            let ds = make_scenario(&spec, 0.004, 0.04, 9, &cfg).unwrap();
            save_scenario(&ds, &csv_path, &json_path).unwrap();
            bytes.push(std::fs::read(&csv_path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }
}
