//! MAP objective, analytic gradients through the low-rank algebra, parameter
//! transforms, and the fixed-budget Adam training loop.
//!
//! The objective is `map_loss = nll - log_prior` with inverse-gamma priors on
//! the five variances and Beta priors on `alpha` and `w`. Optimization runs in
//! an unconstrained space (log variances, logit `alpha`/`w`), with a dedicated
//! learning rate for the noise coordinate.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::kernel::{self, HyperParams, THETA_DIM};
use crate::lowrank::{self, AnchorSet, AnchorStrategy, NystromFactor};
use crate::{Error, Result};

/// Inverse-gamma shape/scale pair.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct InvGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

/// Beta shape pair.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

/// Priors for the full hyperparameter vector.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PriorConfig {
    pub noise: InvGammaPrior,
    pub hidden_bias: InvGammaPrior,
    pub input_weight: InvGammaPrior,
    pub output_bias: InvGammaPrior,
    pub output_weight: InvGammaPrior,
    pub alpha: BetaPrior,
    pub w: BetaPrior,
}

impl Default for PriorConfig {
    /// Weakly informative defaults: Inv-Gamma(2, 1) on every variance and
    /// Beta(2, 2) on `alpha` and `w` (interior-favoring).
    fn default() -> Self {
        let ig = InvGammaPrior { shape: 2.0, scale: 1.0 };
        let beta = BetaPrior { a: 2.0, b: 2.0 };
        Self {
            noise: ig,
            hidden_bias: ig,
            input_weight: ig,
            output_bias: ig,
            output_weight: ig,
            alpha: beta,
            w: beta,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("noise", self.noise),
            ("hidden_bias", self.hidden_bias),
            ("input_weight", self.input_weight),
            ("output_bias", self.output_bias),
            ("output_weight", self.output_weight),
        ];
        for (name, p) in pairs {
            if !(p.shape > 0.0 && p.scale > 0.0 && p.shape.is_finite() && p.scale.is_finite()) {
                return Err(Error::Parameter(format!(
                    "inverse-gamma prior for {name} must have positive shape and scale"
                )));
            }
        }
        for (name, p) in [("alpha", self.alpha), ("w", self.w)] {
            if !(p.a > 0.0 && p.b > 0.0 && p.a.is_finite() && p.b.is_finite()) {
                return Err(Error::Parameter(format!(
                    "Beta prior for {name} must have positive shape parameters"
                )));
            }
        }
        Ok(())
    }

    fn inv_gammas(&self) -> [InvGammaPrior; 5] {
        [self.noise, self.hidden_bias, self.input_weight, self.output_bias, self.output_weight]
    }
}

/// Gradient evaluation mode for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// Objective batching; the GP NLL is evaluated full-batch per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
}

/// Fixed-budget training configuration.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Dedicated learning rate for the noise-variance coordinate.
    pub nugget_learning_rate: f64,
    pub rank: usize,
    pub anchor_strategy: AnchorStrategy,
    pub anchor_seed: u64,
    pub gradient_mode: GradientMode,
    pub batch_mode: BatchMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Relative step for the finite-difference gradient mode.
    pub fd_rel_step: f64,
}

impl TrainConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            nugget_learning_rate: 1e-3,
            rank,
            anchor_strategy: AnchorStrategy::First,
            anchor_seed: 0,
            gradient_mode: GradientMode::Analytic,
            batch_mode: BatchMode::Full,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            fd_rel_step: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.nugget_learning_rate >= 0.0) {
            return Err(Error::Parameter("learning rates must be nonnegative".into()));
        }
        if self.rank == 0 {
            return Err(Error::Parameter("rank must be >= 1".into()));
        }
        if !(self.adam_beta1 > 0.0
            && self.adam_beta1 < 1.0
            && self.adam_beta2 > 0.0
            && self.adam_beta2 < 1.0)
        {
            return Err(Error::Parameter("adam betas must lie in (0,1)".into()));
        }
        if !(self.fd_rel_step > 0.0) {
            return Err(Error::Parameter("fd_rel_step must be > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta_hat: HyperParams,
    /// Loss evaluated at the pre-update parameters of each epoch.
    pub loss_trajectory: Vec<f64>,
    pub wall_time: f64,
    pub anchors: AnchorSet,
}

/// Log prior density up to additive constants:
/// `-(a_q+1) log s_q^2 - b_q / s_q^2` per variance plus the Beta terms on
/// `alpha` and `w`.
pub fn log_prior(theta: &HyperParams, priors: &PriorConfig) -> Result<f64> {
    theta.validate_interior()?;
    priors.validate()?;
    let vars = [theta.sigma_eps2, theta.sigma_a2, theta.sigma_u2, theta.sigma_b2, theta.sigma_v2];
    let mut lp = 0.0;
    for (p, s2) in priors.inv_gammas().iter().zip(vars) {
        lp -= (p.shape + 1.0) * s2.ln() + p.scale / s2;
    }
    lp += (priors.alpha.a - 1.0) * theta.alpha.ln()
        + (priors.alpha.b - 1.0) * (1.0 - theta.alpha).ln();
    lp += (priors.w.a - 1.0) * theta.w.ln() + (priors.w.b - 1.0) * (1.0 - theta.w).ln();
    Ok(lp)
}

/// Gradient of [`log_prior`] in the canonical coordinate order.
pub fn log_prior_grad(theta: &HyperParams, priors: &PriorConfig) -> Result<[f64; THETA_DIM]> {
    theta.validate_interior()?;
    priors.validate()?;
    let vars = [theta.sigma_eps2, theta.sigma_a2, theta.sigma_u2, theta.sigma_b2, theta.sigma_v2];
    let mut g = [0.0; THETA_DIM];
    for (j, (p, s2)) in priors.inv_gammas().iter().zip(vars).enumerate() {
        g[j] = -(p.shape + 1.0) / s2 + p.scale / (s2 * s2);
    }
    g[5] = (priors.alpha.a - 1.0) / theta.alpha
        - (priors.alpha.b - 1.0) / (1.0 - theta.alpha);
    g[6] = (priors.w.a - 1.0) / theta.w - (priors.w.b - 1.0) / (1.0 - theta.w);
    Ok(g)
}

/// GP negative log marginal likelihood through the low-rank factor:
/// `0.5 y' K_hat^{-1} y + 0.5 log det K_hat + (n/2) log 2 pi`.
pub fn nll(y: &DVector<f64>, factor: &NystromFactor) -> Result<f64> {
    if y.len() != factor.n() {
        return Err(Error::Input(format!("y has length {}, expected {}", y.len(), factor.n())));
    }
    let (value, _) = nll_from_factor(y, factor)?;
    Ok(value)
}

/// Anchor selection according to the training configuration.
pub fn select_anchors(x: &DMatrix<f64>, config: &TrainConfig) -> Result<AnchorSet> {
    match config.anchor_strategy {
        AnchorStrategy::First => lowrank::select_anchors_first(x.nrows(), config.rank),
        AnchorStrategy::KMeansPp => {
            lowrank::select_anchors_kmeanspp(x, config.rank, config.anchor_seed)
        }
    }
}

/// Cached inner products between all points and the anchor set; once built,
/// every loss/gradient evaluation reassembles kernel blocks from these
/// products without touching the design matrix again.
pub(crate) struct PairCache {
    pub sq: Vec<f64>,
    /// `n x r` inner products `<x_i, x_{anchor_s}>`.
    pub cross: DMatrix<f64>,
    pub anchor_sq: Vec<f64>,
    /// `r x r` inner products between anchors.
    pub anchor_cross: DMatrix<f64>,
    pub anchors: AnchorSet,
}

impl PairCache {
    pub fn build(x: &DMatrix<f64>, anchors: &AnchorSet) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 {
            return Err(Error::Input("design matrix must be non-empty".into()));
        }
        let pts = kernel::RowMajor::from(x);
        let sq: Vec<f64> = (0..n).map(|i| pts.row(i).iter().map(|v| v * v).sum()).collect();
        let r = anchors.rank();
        let mut cross = DMatrix::<f64>::zeros(n, r);
        for (s, &a) in anchors.indices.iter().enumerate() {
            let xa = pts.row(a);
            for i in 0..n {
                cross[(i, s)] = pts.row(i).iter().zip(xa).map(|(u, v)| u * v).sum();
            }
        }
        let anchor_sq: Vec<f64> = anchors.indices.iter().map(|&a| sq[a]).collect();
        let mut anchor_cross = DMatrix::<f64>::zeros(r, r);
        for (s, &a) in anchors.indices.iter().enumerate() {
            for t in 0..r {
                anchor_cross[(s, t)] = cross[(a, t)];
            }
        }
        Ok(Self { sq, cross, anchor_sq, anchor_cross, anchors: anchors.clone() })
    }

    pub fn factorize(&self, theta: &HyperParams) -> Result<NystromFactor> {
        let n = self.sq.len();
        let r = self.anchors.rank();
        let mut c = DMatrix::<f64>::zeros(n, r);
        for s in 0..r {
            let a_sq = self.anchor_sq[s];
            for i in 0..n {
                c[(i, s)] = kernel::kmix_from_products(self.sq[i], a_sq, self.cross[(i, s)], theta);
            }
        }
        let mut w = DMatrix::<f64>::zeros(r, r);
        for s in 0..r {
            for t in 0..r {
                w[(s, t)] = kernel::kmix_from_products(
                    self.anchor_sq[s],
                    self.anchor_sq[t],
                    self.anchor_cross[(s, t)],
                    theta,
                );
            }
        }
        lowrank::build_factor(c, w, theta.sigma_eps2, self.anchors.clone())
    }
}

fn nll_from_factor(y: &DVector<f64>, factor: &NystromFactor) -> Result<(f64, DVector<f64>)> {
    let alpha = lowrank::lowrank_solve(factor, y)?;
    let value = 0.5 * y.dot(&alpha)
        + 0.5 * lowrank::lowrank_logdet(factor)
        + 0.5 * factor.n() as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok((value, alpha))
}

/// Analytic NLL gradient. With `G = K_hat^{-1} - alpha alpha'` the identity
/// `d NLL / d theta_j = 0.5 tr[G dK_hat/d theta_j]` reduces, for
/// `K_hat = C W^{-1} C' + s2 I`, to
/// `<G C W^{-1}, dC_j> - 0.5 <W^{-1} C' G C W^{-1}, dW_j>` plus `0.5 tr G`
/// for the noise coordinate. Everything is an O(n r^2) contraction of the
/// factor blocks; no n x n matrix is ever formed.
fn nll_grad_analytic(
    cache: &PairCache,
    theta: &HyperParams,
    factor: &NystromFactor,
    alpha: &DVector<f64>,
) -> [f64; THETA_DIM] {
    let n = cache.sq.len();
    let r = cache.anchors.rank();
    let s2 = factor.sigma_eps2;

    // K_hat^{-1} C = (C - B M'^{-1} (B'C)) / s2
    let bt_c = factor.b.transpose() * &factor.c;
    let mid = factor.solve_mp(&bt_c);
    let kinv_c = (&factor.c - &factor.b * mid) / s2;
    // G C = K_hat^{-1} C - alpha (alpha' C)
    let at_c = factor.c.transpose() * alpha;
    let gc = kinv_c - alpha * at_c.transpose();
    // P = G C W^{-1}
    let p = factor.solve_w(&gc.transpose()).transpose();
    // Q = W^{-1} (C' G C) W^{-1}
    let ct_gc = factor.c.transpose() * &gc;
    let q = factor.solve_w(&factor.solve_w(&ct_gc).transpose());

    let mut acc_c = [0.0f64; 6];
    for s in 0..r {
        let a_sq = cache.anchor_sq[s];
        for i in 0..n {
            let g = kernel::kmix_grad_from_products(cache.sq[i], a_sq, cache.cross[(i, s)], theta);
            let pv = p[(i, s)];
            for j in 0..6 {
                acc_c[j] += pv * g[j];
            }
        }
    }
    let mut acc_w = [0.0f64; 6];
    for s in 0..r {
        for t in 0..r {
            let g = kernel::kmix_grad_from_products(
                cache.anchor_sq[s],
                cache.anchor_sq[t],
                cache.anchor_cross[(s, t)],
                theta,
            );
            let qv = q[(s, t)];
            for j in 0..6 {
                acc_w[j] += qv * g[j];
            }
        }
    }

    let mut out = [0.0; THETA_DIM];
    out[0] = 0.5 * (factor.trace_inv() - alpha.dot(alpha));
    for j in 0..6 {
        out[j + 1] = acc_c[j] - 0.5 * acc_w[j];
    }
    out
}

fn loss_at(
    y: &DVector<f64>,
    cache: &PairCache,
    theta: &HyperParams,
    priors: &PriorConfig,
) -> Result<f64> {
    let factor = cache.factorize(theta)?;
    let (nll_value, _) = nll_from_factor(y, &factor)?;
    Ok(nll_value - log_prior(theta, priors)?)
}

fn loss_and_grad(
    y: &DVector<f64>,
    cache: &PairCache,
    theta: &HyperParams,
    priors: &PriorConfig,
    mode: GradientMode,
    fd_rel_step: f64,
) -> Result<(f64, [f64; THETA_DIM])> {
    theta.validate_interior()?;
    let factor = cache.factorize(theta)?;
    let (nll_value, alpha) = nll_from_factor(y, &factor)?;
    let loss = nll_value - log_prior(theta, priors)?;
    let grad = match mode {
        GradientMode::Analytic => {
            let gn = nll_grad_analytic(cache, theta, &factor, &alpha);
            let gp = log_prior_grad(theta, priors)?;
            let mut g = [0.0; THETA_DIM];
            for j in 0..THETA_DIM {
                g[j] = gn[j] - gp[j];
            }
            g
        }
        GradientMode::FiniteDifference => fd_grad(y, cache, theta, priors, fd_rel_step)?,
    };
    Ok((loss, grad))
}

/// Central finite differences of the MAP loss, step `rel_step` relative per
/// coordinate (steps for `alpha`/`w` are shrunk near the (0,1) boundary so
/// both probes stay interior).
fn fd_grad(
    y: &DVector<f64>,
    cache: &PairCache,
    theta: &HyperParams,
    priors: &PriorConfig,
    rel_step: f64,
) -> Result<[f64; THETA_DIM]> {
    let base = theta.to_array();
    let mut g = [0.0; THETA_DIM];
    for j in 0..THETA_DIM {
        let h = if j < 5 { rel_step * base[j] } else { rel_step * base[j].min(1.0 - base[j]) };
        let mut up = base;
        let mut dn = base;
        up[j] += h;
        dn[j] -= h;
        let lu = loss_at(y, cache, &HyperParams::from_array(up), priors)?;
        let ld = loss_at(y, cache, &HyperParams::from_array(dn), priors)?;
        g[j] = (lu - ld) / (2.0 * h);
    }
    Ok(g)
}

/// MAP loss `nll - log_prior` with anchors taken from the training config.
pub fn map_loss(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    theta: &HyperParams,
    priors: &PriorConfig,
    config: &TrainConfig,
) -> Result<f64> {
    config.validate()?;
    check_xy(x, y)?;
    let anchors = select_anchors(x, config)?;
    map_loss_with_anchors(y, x, theta, priors, &anchors)
}

/// MAP loss with a fixed anchor set.
pub fn map_loss_with_anchors(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    theta: &HyperParams,
    priors: &PriorConfig,
    anchors: &AnchorSet,
) -> Result<f64> {
    check_xy(x, y)?;
    theta.validate_interior()?;
    let cache = PairCache::build(x, anchors)?;
    loss_at(y, &cache, theta, priors)
}

/// Gradient of the MAP loss in the canonical coordinate order.
pub fn map_grad(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    theta: &HyperParams,
    priors: &PriorConfig,
    config: &TrainConfig,
) -> Result<[f64; THETA_DIM]> {
    config.validate()?;
    check_xy(x, y)?;
    let anchors = select_anchors(x, config)?;
    let cache = PairCache::build(x, &anchors)?;
    let (_, g) = loss_and_grad(y, &cache, theta, priors, config.gradient_mode, config.fd_rel_step)?;
    Ok(g)
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(Error::Input(format!(
            "y has length {} but the design has {} rows",
            y.len(),
            x.nrows()
        )));
    }
    Ok(())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps `theta` to the unconstrained optimization space: log variances,
/// logit `alpha` and `w`.
pub fn transform(theta: &HyperParams) -> [f64; THETA_DIM] {
    [
        theta.sigma_eps2.ln(),
        theta.sigma_a2.ln(),
        theta.sigma_u2.ln(),
        theta.sigma_b2.ln(),
        theta.sigma_v2.ln(),
        logit(theta.alpha),
        logit(theta.w),
    ]
}

/// Inverse of [`transform`].
pub fn untransform(u: &[f64; THETA_DIM]) -> HyperParams {
    HyperParams::new_unchecked(
        u[0].exp(),
        u[1].exp(),
        u[2].exp(),
        u[3].exp(),
        u[4].exp(),
        logistic(u[5]),
        logistic(u[6]),
    )
}

/// Default initialization: kernel variances 1, `alpha = w = 0.5`, and the
/// noise variance set by the eta-rule `sigma_eps2 = eta * mean_i k(x_i, x_i)`
/// evaluated at that starting point.
pub fn default_init(x: &DMatrix<f64>, eta: f64) -> Result<HyperParams> {
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("eta must be > 0 for initialization, got {eta}")));
    }
    let mut theta = HyperParams::unit();
    theta.sigma_eps2 = crate::simulate::calibrate_nugget(x, &theta, eta)?;
    Ok(theta)
}

/// Runs exactly `config.epochs` Adam steps in the unconstrained space and
/// returns the final parameters with the per-epoch loss trajectory. Anchors
/// are selected once, before the first step; the whole run is deterministic
/// given the seeds in `config`.
pub fn fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    theta0: &HyperParams,
    priors: &PriorConfig,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    priors.validate()?;
    theta0.validate_interior()?;
    check_xy(x, y)?;
    if config.rank > x.nrows() {
        return Err(Error::Parameter(format!(
            "rank {} exceeds the number of observations {}",
            config.rank,
            x.nrows()
        )));
    }
    let start = Instant::now();
    let anchors = select_anchors(x, config)?;
    let cache = PairCache::build(x, &anchors)?;

    let mut u = transform(theta0);
    let mut m = [0.0f64; THETA_DIM];
    let mut v = [0.0f64; THETA_DIM];
    let mut trajectory = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let theta = untransform(&u);
        let (loss, grad_theta) =
            loss_and_grad(y, &cache, &theta, priors, config.gradient_mode, config.fd_rel_step)?;
        if !loss.is_finite() || grad_theta.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite objective at epoch {epoch}: loss = {loss}, theta = {theta:?}"
            )));
        }
        trajectory.push(loss);

        // chain rule d theta / d u: sigma^2 for log coordinates, p(1-p) for logits
        let jac = [
            theta.sigma_eps2,
            theta.sigma_a2,
            theta.sigma_u2,
            theta.sigma_b2,
            theta.sigma_v2,
            theta.alpha * (1.0 - theta.alpha),
            theta.w * (1.0 - theta.w),
        ];
        let t = epoch as i32;
        let bc1 = 1.0 - config.adam_beta1.powi(t);
        let bc2 = 1.0 - config.adam_beta2.powi(t);
        for j in 0..THETA_DIM {
            let g = grad_theta[j] * jac[j];
            m[j] = config.adam_beta1 * m[j] + (1.0 - config.adam_beta1) * g;
            v[j] = config.adam_beta2 * v[j] + (1.0 - config.adam_beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let lr = if j == 0 { config.nugget_learning_rate } else { config.learning_rate };
            u[j] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }

    Ok(FitResult {
        theta_hat: untransform(&u),
        loss_trajectory: trajectory,
        wall_time: start.elapsed().as_secs_f64(),
        anchors,
    })
}
