//! Closed-form activation-induced kernels and the reduced mixed kernel.
//!
//! Every kernel here is a function of the pre-activation moments of a pair of
//! inputs under the shallow-BNN prior: with `z = a + u'x` and Gaussian priors
//! on `(a, u)`, the pair `(z, z')` is centered bivariate Gaussian with
//! variances `sigma_a^2 + sigma_u^2 ||x||^2` and covariance
//! `sigma_a^2 + sigma_u^2 <x, x'>`. The tanh/sigmoid kernels use the standard
//! erf-approximation closed forms (arcsine family); ReLU/LeakyReLU have exact
//! arc-cosine-type closed forms.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Number of hyperparameters in the full vector
/// `(sigma_eps2, sigma_a2, sigma_u2, sigma_b2, sigma_v2, alpha, w)`.
pub const THETA_DIM: usize = 7;

/// Kernel and noise hyperparameters of the mixed-kernel GP.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperParams {
    /// Observation-noise variance (nugget).
    pub sigma_eps2: f64,
    /// Hidden-layer bias prior variance.
    pub sigma_a2: f64,
    /// Input-weight prior variance.
    pub sigma_u2: f64,
    /// Output-bias prior variance.
    pub sigma_b2: f64,
    /// Output-weight prior variance (before the 1/H scaling).
    pub sigma_v2: f64,
    /// LeakyReLU slope, in (0, 1).
    pub alpha: f64,
    /// Mixture weight of the smooth component, in (0, 1).
    pub w: f64,
}

impl HyperParams {
    /// Validated constructor: all variances strictly positive, `alpha` and `w`
    /// strictly inside (0, 1).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sigma_eps2: f64,
        sigma_a2: f64,
        sigma_u2: f64,
        sigma_b2: f64,
        sigma_v2: f64,
        alpha: f64,
        w: f64,
    ) -> Result<Self> {
        let theta = Self::new_unchecked(sigma_eps2, sigma_a2, sigma_u2, sigma_b2, sigma_v2, alpha, w);
        theta.validate_interior()?;
        Ok(theta)
    }

    /// Unvalidated constructor. Boundary values (`alpha` or `w` in {0, 1}) are
    /// permitted here so tests can evaluate the collapse limits; kernels are
    /// still well defined there, but gradient routines reject such values.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unchecked(
        sigma_eps2: f64,
        sigma_a2: f64,
        sigma_u2: f64,
        sigma_b2: f64,
        sigma_v2: f64,
        alpha: f64,
        w: f64,
    ) -> Self {
        Self { sigma_eps2, sigma_a2, sigma_u2, sigma_b2, sigma_v2, alpha, w }
    }

    /// All kernel variances 1, `alpha = w = 0.5`, unit nugget.
    pub fn unit() -> Self {
        Self::new_unchecked(1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5)
    }

    /// Checks strict positivity of the variances and that `alpha`, `w` lie in
    /// the open interval (0, 1).
    pub fn validate_interior(&self) -> Result<()> {
        let vars = [
            ("sigma_eps2", self.sigma_eps2),
            ("sigma_a2", self.sigma_a2),
            ("sigma_u2", self.sigma_u2),
            ("sigma_b2", self.sigma_b2),
            ("sigma_v2", self.sigma_v2),
        ];
        for (name, v) in vars {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("w", self.w)] {
            if !(v.is_finite() && v > 0.0 && v < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in the open interval (0,1), got {v}")));
            }
        }
        Ok(())
    }

    /// Canonical order `(sigma_eps2, sigma_a2, sigma_u2, sigma_b2, sigma_v2, alpha, w)`.
    pub fn to_array(&self) -> [f64; THETA_DIM] {
        [
            self.sigma_eps2,
            self.sigma_a2,
            self.sigma_u2,
            self.sigma_b2,
            self.sigma_v2,
            self.alpha,
            self.w,
        ]
    }

    /// Inverse of [`HyperParams::to_array`]; does not validate.
    pub fn from_array(a: [f64; THETA_DIM]) -> Self {
        Self::new_unchecked(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }
}

/// Per-pair pre-activation statistics of the shallow BNN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreactMoments {
    /// `Var(z) = sigma_a^2 + sigma_u^2 ||x||^2`.
    pub var_z: f64,
    /// `Var(z') = sigma_a^2 + sigma_u^2 ||x'||^2`.
    pub var_zp: f64,
    /// `Cov(z, z') = sigma_a^2 + sigma_u^2 <x, x'>`.
    pub cov: f64,
    /// `Corr(z, z')`, clamped to [-1, 1].
    pub rho: f64,
}

impl PreactMoments {
    /// Builds moments from the two variances and the covariance, clamping the
    /// correlation to [-1, 1] (only FP rounding can push it outside).
    pub fn from_parts(var_z: f64, var_zp: f64, cov: f64) -> Result<Self> {
        if !(var_z > 0.0 && var_zp > 0.0) {
            return Err(Error::Parameter(format!(
                "pre-activation variances must be > 0, got ({var_z}, {var_zp})"
            )));
        }
        let rho = (cov / (var_z * var_zp).sqrt()).clamp(-1.0, 1.0);
        Ok(Self { var_z, var_zp, cov, rho })
    }

    /// Builds moments directly from a correlation (used for shape probes where
    /// `sigma_z = sigma_z' = 1` and `rho` is swept over a grid).
    pub fn from_correlation(var_z: f64, var_zp: f64, rho: f64) -> Result<Self> {
        let rho = rho.clamp(-1.0, 1.0);
        let cov = rho * (var_z * var_zp).sqrt();
        Self::from_parts(var_z, var_zp, cov)
    }
}

/// Symmetric kernel matrix over a finite design.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    /// Covariance values; exactly symmetric (each unordered pair computed once).
    pub values: DMatrix<f64>,
    /// Number of design points.
    pub n: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_same_dim(x: &[f64], x_prime: &[f64]) -> Result<()> {
    if x.len() != x_prime.len() {
        return Err(Error::Input(format!(
            "input dimension mismatch: {} vs {}",
            x.len(),
            x_prime.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Input("inputs must have dimension >= 1".into()));
    }
    Ok(())
}

/// Pre-activation moments of the pair `(x, x')` under the BNN prior.
pub fn preactivation_moments(
    x: &[f64],
    x_prime: &[f64],
    sigma_a2: f64,
    sigma_u2: f64,
) -> Result<PreactMoments> {
    check_same_dim(x, x_prime)?;
    if !(sigma_a2 > 0.0 && sigma_u2 > 0.0) {
        return Err(Error::Parameter(format!(
            "sigma_a2 and sigma_u2 must be > 0, got ({sigma_a2}, {sigma_u2})"
        )));
    }
    Ok(moments_from_products(dot(x, x), dot(x_prime, x_prime), dot(x, x_prime), sigma_a2, sigma_u2))
}

/// Moments from cached inner products `<x,x>`, `<x',x'>`, `<x,x'>`.
#[inline]
pub(crate) fn moments_from_products(
    xx: f64,
    xpxp: f64,
    xxp: f64,
    sigma_a2: f64,
    sigma_u2: f64,
) -> PreactMoments {
    let var_z = sigma_a2 + sigma_u2 * xx;
    let var_zp = sigma_a2 + sigma_u2 * xpxp;
    let cov = sigma_a2 + sigma_u2 * xxp;
    let rho = (cov / (var_z * var_zp).sqrt()).clamp(-1.0, 1.0);
    PreactMoments { var_z, var_zp, cov, rho }
}

/// Smooth (arcsine) kernel induced by the erf-approximated tanh activation.
pub fn k_tanh(m: &PreactMoments) -> f64 {
    let denom = ((1.0 + 0.5 * PI * m.var_z) * (1.0 + 0.5 * PI * m.var_zp)).sqrt();
    let arg = (0.5 * PI * m.rho * (m.var_z * m.var_zp).sqrt() / denom).clamp(-1.0, 1.0);
    (2.0 / PI) * arg.asin()
}

/// Arcsine-family kernel induced by the erf-approximated sigmoid activation.
pub fn k_sigmoid(m: &PreactMoments) -> f64 {
    let c = PI / 8.0;
    let denom = ((1.0 + c * m.var_z) * (1.0 + c * m.var_zp)).sqrt();
    let arg = (c * m.rho * (m.var_z * m.var_zp).sqrt() / denom).clamp(-1.0, 1.0);
    0.25 + arg.asin() / (2.0 * PI)
}

/// Arc-cosine shape factor `S(rho) = [sqrt(1-rho^2) + rho (pi - acos rho)] / (2 pi)`.
#[inline]
fn arccos_shape(rho: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    ((1.0 - rho * rho).max(0.0).sqrt() + rho * (PI - rho.acos())) / (2.0 * PI)
}

/// Exact ReLU-induced kernel (arc-cosine type).
pub fn k_relu(m: &PreactMoments) -> f64 {
    (m.var_z * m.var_zp).sqrt() * arccos_shape(m.rho)
}

/// Exact LeakyReLU-induced kernel: `sigma_z sigma_z' [alpha rho + (1-alpha)^2 S(rho)]`.
pub fn k_leaky_relu(m: &PreactMoments, alpha: f64) -> f64 {
    let sz_szp = (m.var_z * m.var_zp).sqrt();
    sz_szp * (alpha * m.rho + (1.0 - alpha) * (1.0 - alpha) * arccos_shape(m.rho))
}

#[inline]
fn mix_components(m: &PreactMoments, alpha: f64) -> (f64, f64) {
    (k_tanh(m), k_leaky_relu(m, alpha))
}

#[inline]
pub(crate) fn kmix_from_moments(m: &PreactMoments, theta: &HyperParams) -> f64 {
    let (kt, kl) = mix_components(m, theta.alpha);
    theta.sigma_b2 + theta.sigma_v2 * (theta.w * kt + (1.0 - theta.w) * kl)
}

#[inline]
pub(crate) fn kmix_from_products(xx: f64, xpxp: f64, xxp: f64, theta: &HyperParams) -> f64 {
    let m = moments_from_products(xx, xpxp, xxp, theta.sigma_a2, theta.sigma_u2);
    kmix_from_moments(&m, theta)
}

/// Reduced mixed kernel
/// `k_mix(x,x') = sigma_b^2 + sigma_v^2 [ w k_tanh + (1-w) k_leaky_relu ]`.
///
/// The noise variance `sigma_eps2` is not added here.
pub fn k_mix(x: &[f64], x_prime: &[f64], theta: &HyperParams) -> Result<f64> {
    check_same_dim(x, x_prime)?;
    Ok(kmix_from_products(dot(x, x), dot(x_prime, x_prime), dot(x, x_prime), theta))
}

/// Assembles the symmetric `n x n` mixed-kernel matrix over the rows of `x`.
///
/// Each unordered pair is computed once and mirrored, so the output is exactly
/// symmetric.
pub fn kernel_matrix(x: &DMatrix<f64>, theta: &HyperParams) -> Result<KernelMatrix> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(Error::Input("design matrix must be non-empty".into()));
    }
    let pts = RowMajor::from(x);
    let sq: Vec<f64> = (0..n).map(|i| dot(pts.row(i), pts.row(i))).collect();
    let mut values = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let xi = pts.row(i);
        for j in 0..=i {
            let v = kmix_from_products(sq[i], sq[j], dot(xi, pts.row(j)), theta);
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { values, n })
}

/// Cross-kernel matrix between the rows of `xa` (na) and `xb` (nb).
pub fn cross_kernel(xa: &DMatrix<f64>, xb: &DMatrix<f64>, theta: &HyperParams) -> Result<DMatrix<f64>> {
    if xa.ncols() != xb.ncols() {
        return Err(Error::Input(format!(
            "input dimension mismatch: {} vs {}",
            xa.ncols(),
            xb.ncols()
        )));
    }
    if xa.nrows() == 0 || xb.nrows() == 0 || xa.ncols() == 0 {
        return Err(Error::Input("design matrices must be non-empty".into()));
    }
    let pa = RowMajor::from(xa);
    let pb = RowMajor::from(xb);
    let sa: Vec<f64> = (0..pa.n).map(|i| dot(pa.row(i), pa.row(i))).collect();
    let sb: Vec<f64> = (0..pb.n).map(|i| dot(pb.row(i), pb.row(i))).collect();
    let mut out = DMatrix::<f64>::zeros(pa.n, pb.n);
    for i in 0..pa.n {
        let xi = pa.row(i);
        for j in 0..pb.n {
            out[(i, j)] = kmix_from_products(sa[i], sb[j], dot(xi, pb.row(j)), theta);
        }
    }
    Ok(out)
}

/// Row-major copy of a design matrix; nalgebra stores column-major, which is
/// hostile to per-point inner products in the assembly loops.
pub(crate) struct RowMajor {
    pub data: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl RowMajor {
    pub fn from(x: &DMatrix<f64>) -> Self {
        let (n, dim) = (x.nrows(), x.ncols());
        let mut data = vec![0.0; n * dim];
        for i in 0..n {
            for d in 0..dim {
                data[i * dim + d] = x[(i, d)];
            }
        }
        Self { data, n, dim }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Entrywise derivatives of the mixed kernel with respect to the inner-product
/// coordinates `(var_z, var_zp, cov)`, split by component, plus the component
/// values themselves. All expressions stay finite at `rho = +-1` (the ReLU
/// derivatives carry `sqrt(var_z var_zp - cov^2)` in the numerator).
struct PairDerivs {
    kt: f64,
    kl: f64,
    // d k_tanh / d(var_z, var_zp, cov)
    dkt: [f64; 3],
    // d k_leaky / d(var_z, var_zp, cov)
    dkl: [f64; 3],
    // d k_leaky / d alpha
    dkl_dalpha: f64,
}

fn pair_derivs(m: &PreactMoments, alpha: f64) -> PairDerivs {
    let (nu, nup, c) = (m.var_z, m.var_zp, m.cov);
    // tanh component: kt = (2/pi) asin(g), g = (pi/2) c / sqrt(A A')
    let a = 1.0 + 0.5 * PI * nu;
    let ap = 1.0 + 0.5 * PI * nup;
    let root_aap = (a * ap).sqrt();
    let g = (0.5 * PI * c / root_aap).clamp(-1.0, 1.0);
    let kt = (2.0 / PI) * g.asin();
    let omg2 = (1.0 - g * g).max(f64::MIN_POSITIVE).sqrt();
    let dkt = [
        -g / (2.0 * a * omg2),
        -g / (2.0 * ap * omg2),
        1.0 / (omg2 * root_aap),
    ];

    // ReLU component in (nu, nu', c) coordinates:
    //   k_relu = [s + c (pi - acos rho)] / (2 pi),  s = sqrt(nu nu' - c^2)
    // with the compact derivatives
    //   d/dc = (pi - acos rho) / (2 pi),  d/dnu = s / (4 pi nu).
    let s = (nu * nup - c * c).max(0.0).sqrt();
    let rho = m.rho;
    let pi_m_acos = PI - rho.acos();
    let krelu = (s + c * pi_m_acos) / (2.0 * PI);
    let dkr = [s / (4.0 * PI * nu), s / (4.0 * PI * nup), pi_m_acos / (2.0 * PI)];

    // LeakyReLU: k_leaky = alpha c + (1-alpha)^2 k_relu
    let oma = 1.0 - alpha;
    let kl = alpha * c + oma * oma * krelu;
    let dkl = [
        oma * oma * dkr[0],
        oma * oma * dkr[1],
        alpha + oma * oma * dkr[2],
    ];
    let dkl_dalpha = c - 2.0 * oma * krelu;

    PairDerivs { kt, kl, dkt, dkl, dkl_dalpha }
}

/// Mixed-kernel gradient in the kernel coordinates only, from cached inner
/// products. Order: `(sigma_a2, sigma_u2, sigma_b2, sigma_v2, alpha, w)`.
#[inline]
pub(crate) fn kmix_grad_from_products(
    xx: f64,
    xpxp: f64,
    xxp: f64,
    theta: &HyperParams,
) -> [f64; 6] {
    let m = moments_from_products(xx, xpxp, xxp, theta.sigma_a2, theta.sigma_u2);
    let d = pair_derivs(&m, theta.alpha);
    let w = theta.w;
    let sv2 = theta.sigma_v2;
    // chain rule: var_z, var_zp, cov are affine in sigma_a2 (slope 1) and in
    // sigma_u2 (slopes <x,x>, <x',x'>, <x,x'>)
    let mix = |k: usize| w * d.dkt[k] + (1.0 - w) * d.dkl[k];
    [
        sv2 * (mix(0) + mix(1) + mix(2)),
        sv2 * (mix(0) * xx + mix(1) * xpxp + mix(2) * xxp),
        1.0,
        w * d.kt + (1.0 - w) * d.kl,
        sv2 * (1.0 - w) * d.dkl_dalpha,
        sv2 * (d.kt - d.kl),
    ]
}

/// Analytic gradient of the noisy kernel entry `k_mix(x,x') + sigma_eps2 [x = x']`
/// with respect to the full hyperparameter vector, in the canonical order
/// `(sigma_eps2, sigma_a2, sigma_u2, sigma_b2, sigma_v2, alpha, w)`.
///
/// `same_index` flags whether the two arguments refer to the same observation,
/// which is when the noise derivative is 1.
pub fn kernel_grad(
    x: &[f64],
    x_prime: &[f64],
    theta: &HyperParams,
    same_index: bool,
) -> Result<[f64; THETA_DIM]> {
    check_same_dim(x, x_prime)?;
    theta.validate_interior()?;
    let g = kmix_grad_from_products(dot(x, x), dot(x_prime, x_prime), dot(x, x_prime), theta);
    Ok([
        if same_index { 1.0 } else { 0.0 },
        g[0],
        g[1],
        g[2],
        g[3],
        g[4],
        g[5],
    ])
}

/// Central finite-difference fallback for [`kernel_grad`] (relative step per
/// coordinate). The analytic path is the default contract; this exists for
/// cross-checking.
pub fn kernel_grad_fd(
    x: &[f64],
    x_prime: &[f64],
    theta: &HyperParams,
    same_index: bool,
    rel_step: f64,
) -> Result<[f64; THETA_DIM]> {
    check_same_dim(x, x_prime)?;
    theta.validate_interior()?;
    let base = theta.to_array();
    let mut out = [0.0; THETA_DIM];
    out[0] = if same_index { 1.0 } else { 0.0 };
    for j in 1..THETA_DIM {
        let h = rel_step * base[j].abs().max(rel_step);
        let mut up = base;
        let mut dn = base;
        up[j] += h;
        dn[j] -= h;
        let ku = k_mix(x, x_prime, &HyperParams::from_array(up))?;
        let kd = k_mix(x, x_prime, &HyperParams::from_array(dn))?;
        out[j] = (ku - kd) / (2.0 * h);
    }
    Ok(out)
}

/// Identifier of one activation-kernel shape for curve comparisons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelShape {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu { alpha: f64 },
}

impl KernelShape {
    fn eval(&self, rho: f64) -> f64 {
        let m = PreactMoments::from_correlation(1.0, 1.0, rho).expect("unit variances");
        match self {
            KernelShape::Tanh => k_tanh(&m),
            KernelShape::Sigmoid => k_sigmoid(&m),
            KernelShape::Relu => k_relu(&m),
            KernelShape::LeakyRelu { alpha } => k_leaky_relu(&m, *alpha),
        }
    }
}

/// Default correlation grid for shape comparisons: 401 equally spaced points
/// in [-0.999, 0.999] (endpoints avoided for curvature stability).
pub fn default_rho_grid() -> Vec<f64> {
    let n = 401;
    (0..n)
        .map(|i| -0.999 + 1.998 * (i as f64) / ((n - 1) as f64))
        .collect()
}

/// Pearson correlation between two kernel shapes sampled on a `rho` grid with
/// `sigma_z = sigma_z' = 1` (centering and normalization are implicit in the
/// correlation).
pub fn shape_correlation(kernel_a: KernelShape, kernel_b: KernelShape, grid: &[f64]) -> Result<f64> {
    if grid.len() < 100 {
        return Err(Error::Input(format!(
            "shape grid must have at least 100 points, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|&r| !(r.abs() < 1.0)) {
        return Err(Error::Input("shape grid points must lie strictly inside (-1, 1)".into()));
    }
    let ya: Vec<f64> = grid.iter().map(|&r| kernel_a.eval(r)).collect();
    let yb: Vec<f64> = grid.iter().map(|&r| kernel_b.eval(r)).collect();
    pearson(&ya, &yb)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::Numeric(
            "shape correlation undefined: at least one curve is constant on the grid".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}
