//! Nystrom low-rank factorization of the noisy covariance.
//!
//! The operational form is low-rank plus diagonal,
//! `K_hat = C W^{-1} C' + sigma_eps2 I` with `C = K_{:S}` and `W = K_SS`
//! (noiseless blocks), which is invertible for every rank and admits the usual
//! O(n r^2) solve and log-determinant. Internally the factor keeps
//! `B = C L_W^{-T}` and a Cholesky of `M' = sigma_eps2 I + B'B`; this is
//! algebraically the same as the `M = sigma_eps2 W + C'C` route
//! (`M = L_W M' L_W'`) but stays well conditioned when `W` is nearly singular.
//!
//! A literal mode that applies Nystrom to the noisy matrix and works through
//! the pseudo-inverse of the resulting rank-r matrix is provided separately
//! for comparison ([`LiteralNystrom`]).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::kernel::{self, HyperParams, RowMajor};
use crate::{Error, Result};

/// Anchor-selection strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorStrategy {
    /// The first r points, in index order.
    First,
    /// k-means++ seeding (no Lloyd iterations), returning data indices.
    #[serde(rename = "kmeanspp")]
    KMeansPp,
}

/// A set of r distinct anchor indices.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AnchorSet {
    /// Ascending for [`AnchorStrategy::First`]; in selection order for k-means++.
    pub indices: Vec<usize>,
    pub strategy: AnchorStrategy,
    pub seed: u64,
}

impl AnchorSet {
    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    fn validate(&self, n: usize) -> Result<()> {
        let r = self.indices.len();
        if r == 0 || r > n {
            return Err(Error::Input(format!("anchor count {r} must satisfy 1 <= r <= n = {n}")));
        }
        let mut seen = vec![false; n];
        for &i in &self.indices {
            if i >= n {
                return Err(Error::Input(format!("anchor index {i} out of range for n = {n}")));
            }
            if seen[i] {
                return Err(Error::Input(format!("duplicate anchor index {i}")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Anchors `{0, ..., r-1}`.
pub fn select_anchors_first(n: usize, r: usize) -> Result<AnchorSet> {
    if r == 0 || r > n {
        return Err(Error::Input(format!("rank {r} must satisfy 1 <= r <= n = {n}")));
    }
    Ok(AnchorSet { indices: (0..r).collect(), strategy: AnchorStrategy::First, seed: 0 })
}

/// k-means++ seeding over the rows of `x`: first index uniform, then each
/// subsequent index with probability proportional to the squared Euclidean
/// distance to the nearest already-selected row. If every remaining distance
/// is zero (duplicate rows), falls back to a uniform pick among the
/// unselected indices.
pub fn select_anchors_kmeanspp(x: &DMatrix<f64>, r: usize, seed: u64) -> Result<AnchorSet> {
    let n = x.nrows();
    if r == 0 || r > n {
        return Err(Error::Input(format!("rank {r} must satisfy 1 <= r <= n = {n}")));
    }
    let pts = RowMajor::from(x);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(r);
    let first = rng.random_range(0..n);
    indices.push(first);

    let dist2 = |a: usize, b: usize| -> f64 {
        pts.row(a)
            .iter()
            .zip(pts.row(b))
            .map(|(u, v)| (u - v) * (u - v))
            .sum()
    };
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(i, first)).collect();
    d2[first] = 0.0;

    while indices.len() < r {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &weight) in d2.iter().enumerate() {
                if weight > 0.0 {
                    acc += weight;
                    pick = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            pick.expect("total > 0 implies a positive weight exists")
        } else {
            // all remaining distances zero: uniform over unselected indices
            let unselected: Vec<usize> = (0..n).filter(|i| !indices.contains(i)).collect();
            unselected[rng.random_range(0..unselected.len())]
        };
        indices.push(next);
        for i in 0..n {
            let d = dist2(i, next);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        d2[next] = 0.0;
    }
    Ok(AnchorSet { indices, strategy: AnchorStrategy::KMeansPp, seed })
}

/// Cholesky with an escalating jitter ladder: plain attempt first, then
/// `1e-10 * mean(diag)` escalating tenfold per failure up to `1e-4 * mean(diag)`.
pub(crate) fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = mat.nrows();
    let mean_diag = mat.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    let scale = mean_diag.max(f64::MIN_POSITIVE);
    let mut ladder = vec![0.0];
    let mut j = 1e-10 * scale;
    while j <= 1e-4 * scale * (1.0 + 1e-12) {
        ladder.push(j);
        j *= 10.0;
    }
    for &jitter in &ladder {
        let mut attempt = mat.clone();
        for i in 0..n {
            attempt[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(attempt) {
            return Ok((ch, jitter));
        }
    }
    Err(Error::Numeric(format!(
        "Cholesky failed after the jitter ladder {ladder:?} (mean diagonal {mean_diag:.3e})"
    )))
}

/// Low-rank factor of `K_hat = C W^{-1} C' + sigma_eps2 I`.
pub struct NystromFactor {
    pub anchors: AnchorSet,
    /// `n x r` noiseless cross-covariance `K_{:S}`.
    pub c: DMatrix<f64>,
    /// `r x r` noiseless anchor block `K_SS` plus the jitter actually used.
    pub w: DMatrix<f64>,
    pub sigma_eps2: f64,
    pub jitter_used: f64,
    chol_w: Cholesky<f64, Dyn>,
    /// `B = C L_W^{-T}`.
    pub(crate) b: DMatrix<f64>,
    /// Cholesky of `M' = sigma_eps2 I + B'B`.
    pub(crate) chol_mp: Cholesky<f64, Dyn>,
}

impl NystromFactor {
    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn rank(&self) -> usize {
        self.c.ncols()
    }

    /// Lower-triangular Cholesky factor of `W`.
    pub fn chol_w(&self) -> DMatrix<f64> {
        self.chol_w.l()
    }

    /// Lower-triangular Cholesky factor of `M = sigma_eps2 W + C'C`
    /// (`L_M = L_W L_M'`, a product of lower triangulars).
    pub fn chol_m(&self) -> DMatrix<f64> {
        self.chol_w.l() * self.chol_mp.l()
    }

    pub(crate) fn solve_w(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_w.solve(rhs)
    }

    pub(crate) fn solve_mp(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_mp.solve(rhs)
    }

    /// `trace(K_hat^{-1})`, needed by the noise-variance gradient.
    pub(crate) fn trace_inv(&self) -> f64 {
        // tr(K_hat^{-1}) = (n - r + sigma_eps2 tr(M'^{-1})) / sigma_eps2
        let r = self.rank();
        let l_inv = self
            .chol_mp
            .l()
            .solve_lower_triangular(&DMatrix::<f64>::identity(r, r))
            .expect("triangular factor has positive diagonal");
        let tr_mp_inv = l_inv.iter().map(|v| v * v).sum::<f64>();
        (self.n() as f64 - r as f64 + self.sigma_eps2 * tr_mp_inv) / self.sigma_eps2
    }
}

/// Builds the Nystrom factor from noiseless kernel blocks over the anchors.
pub fn nystrom_factorize(
    x: &DMatrix<f64>,
    theta: &HyperParams,
    anchors: &AnchorSet,
) -> Result<NystromFactor> {
    theta.validate_interior()?;
    let n = x.nrows();
    anchors.validate(n)?;
    let pts = RowMajor::from(x);
    let sq: Vec<f64> = (0..n).map(|i| {
        let row = pts.row(i);
        row.iter().map(|v| v * v).sum()
    }).collect();
    let r = anchors.rank();

    let mut c = DMatrix::<f64>::zeros(n, r);
    for (s, &a) in anchors.indices.iter().enumerate() {
        let xa = pts.row(a);
        for i in 0..n {
            let xi = pts.row(i);
            let xxp = xi.iter().zip(xa).map(|(u, v)| u * v).sum();
            c[(i, s)] = kernel::kmix_from_products(sq[i], sq[a], xxp, theta);
        }
    }
    // the anchor block is a row gather of C
    let mut w_raw = DMatrix::<f64>::zeros(r, r);
    for (s, &a) in anchors.indices.iter().enumerate() {
        for t in 0..r {
            w_raw[(s, t)] = c[(a, t)];
        }
    }
    build_factor(c, w_raw, theta.sigma_eps2, anchors.clone())
}

pub(crate) fn build_factor(
    c: DMatrix<f64>,
    mut w: DMatrix<f64>,
    sigma_eps2: f64,
    anchors: AnchorSet,
) -> Result<NystromFactor> {
    let r = w.nrows();
    let (chol_w, jitter_used) = cholesky_with_jitter(&w)?;
    for i in 0..r {
        w[(i, i)] += jitter_used;
    }
    let l_w = chol_w.l();
    let bt = l_w
        .solve_lower_triangular(&c.transpose())
        .ok_or_else(|| Error::Numeric("triangular solve against L_W failed".into()))?;
    let b = bt.transpose();
    let mut mp = b.transpose() * &b;
    for i in 0..r {
        mp[(i, i)] += sigma_eps2;
    }
    let chol_mp = Cholesky::new(mp)
        .ok_or_else(|| Error::Numeric("Cholesky of sigma_eps2 I + B'B failed".into()))?;
    Ok(NystromFactor { anchors, c, w, sigma_eps2, jitter_used, chol_w, b, chol_mp })
}

/// `K_hat^{-1} b` via `sigma_eps2^{-1} [ b - B M'^{-1} (B' b) ]`.
pub fn lowrank_solve(f: &NystromFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != f.n() {
        return Err(Error::Input(format!("rhs has length {}, expected {}", b.len(), f.n())));
    }
    let bt_b = f.b.transpose() * b;
    let mid = f.chol_mp.solve(&bt_b);
    Ok((b - &f.b * mid) / f.sigma_eps2)
}

/// `log det K_hat = (n - r) log sigma_eps2 + log det M - log det W`,
/// both log-determinants read off the triangular factors.
pub fn lowrank_logdet(f: &NystromFactor) -> f64 {
    let (n, r) = (f.n() as f64, f.rank() as f64);
    let ld_w: f64 = 2.0 * f.chol_w.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    // diag(L_M) = diag(L_W) .* diag(L_M'), so log det M splits additively
    let ld_m: f64 =
        ld_w + 2.0 * f.chol_mp.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    (n - r) * f.sigma_eps2.ln() + ld_m - ld_w
}

/// Explicit reconstruction `C W^{-1} C'` of the noiseless low-rank part
/// (test/diagnostic use; O(n^2 r)).
pub fn lowrank_explicit(f: &NystromFactor) -> DMatrix<f64> {
    &f.b * f.b.transpose()
}

/// Literal Nystrom mode: the approximation is applied to the noisy matrix,
/// `K_tilde^(r) = K_tilde_{:S} K_tilde_SS^{-1} K_tilde_{S:}`, which has rank r
/// and is used through its Moore-Penrose pseudo-inverse.
pub struct LiteralNystrom {
    /// `n x r` noisy cross block.
    c_noisy: DMatrix<f64>,
    /// Cholesky of the noisy anchor block.
    chol_w_noisy: Cholesky<f64, Dyn>,
    /// Cholesky of the Gram matrix `C~' C~`.
    chol_gram: Cholesky<f64, Dyn>,
    w_noisy: DMatrix<f64>,
}

pub fn literal_factorize(
    x: &DMatrix<f64>,
    theta: &HyperParams,
    anchors: &AnchorSet,
) -> Result<LiteralNystrom> {
    theta.validate_interior()?;
    let n = x.nrows();
    anchors.validate(n)?;
    let km = kernel::kernel_matrix(x, theta)?;
    let mut noisy = km.values;
    for i in 0..n {
        noisy[(i, i)] += theta.sigma_eps2;
    }
    let r = anchors.rank();
    let mut c_noisy = DMatrix::<f64>::zeros(n, r);
    let mut w_noisy = DMatrix::<f64>::zeros(r, r);
    for (s, &a) in anchors.indices.iter().enumerate() {
        for i in 0..n {
            c_noisy[(i, s)] = noisy[(i, a)];
        }
    }
    for (s, &a) in anchors.indices.iter().enumerate() {
        for (t, &bidx) in anchors.indices.iter().enumerate() {
            w_noisy[(s, t)] = noisy[(a, bidx)];
        }
    }
    let (chol_w_noisy, _) = cholesky_with_jitter(&w_noisy)?;
    let gram = c_noisy.transpose() * &c_noisy;
    let (chol_gram, _) = cholesky_with_jitter(&gram)?;
    Ok(LiteralNystrom { c_noisy, chol_w_noisy, chol_gram, w_noisy })
}

impl LiteralNystrom {
    /// Pseudo-inverse application
    /// `(K~^(r))^+ b = C~ G^{-1} W~ G^{-1} C~' b` with `G = C~'C~`
    /// (valid because `C~` has full column rank after jitter).
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.c_noisy.nrows() {
            return Err(Error::Input(format!(
                "rhs has length {}, expected {}",
                b.len(),
                self.c_noisy.nrows()
            )));
        }
        let t1 = self.c_noisy.transpose() * b;
        let t2 = self.chol_gram.solve(&t1);
        let t3 = &self.w_noisy * t2;
        let t4 = self.chol_gram.solve(&t3);
        Ok(&self.c_noisy * t4)
    }

    /// Pseudo-log-determinant (sum of logs of the r nonzero eigenvalues):
    /// `log det G - log det W~`.
    pub fn pseudo_logdet(&self) -> f64 {
        let ld_g: f64 = 2.0 * self.chol_gram.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ld_w: f64 =
            2.0 * self.chol_w_noisy.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        ld_g - ld_w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseGp;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_design(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, dim, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn first_anchor_examples() {
        assert_eq!(select_anchors_first(10, 3).unwrap().indices, vec![0, 1, 2]);
        assert_eq!(select_anchors_first(4, 4).unwrap().indices, vec![0, 1, 2, 3]);
        assert_eq!(select_anchors_first(1, 1).unwrap().indices, vec![0]);
        assert!(select_anchors_first(3, 4).is_err());
        assert!(select_anchors_first(3, 0).is_err());
    }

    #[test]
    fn kmeanspp_r1_is_single_index() {
        let x = random_design(20, 3, 1);
        let a = select_anchors_kmeanspp(&x, 1, 9).unwrap();
        assert_eq!(a.indices.len(), 1);
        assert!(a.indices[0] < 20);
    }

    #[test]
    fn kmeanspp_identical_rows_fall_back_to_uniform() {
        let x = DMatrix::from_element(6, 2, 0.25);
        let a = select_anchors_kmeanspp(&x, 3, 4).unwrap();
        assert_eq!(a.indices.len(), 3);
        let mut sorted = a.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3, "indices must be distinct");
    }

    #[test]
    fn kmeanspp_d2_distribution_on_the_line() {
        // X = {0, 1, 10}: after selecting the point at 0, the next pick is 10
        // with probability 100/101
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 10.0]);
        let mut cond = 0usize;
        let mut hit = 0usize;
        for seed in 0..6000 {
            let a = select_anchors_kmeanspp(&x, 2, seed).unwrap();
            if a.indices[0] == 0 {
                cond += 1;
                if a.indices[1] == 2 {
                    hit += 1;
                }
            }
        }
        assert!(cond > 1500, "uniform first pick should hit index 0 about a third of the time");
        let p = hit as f64 / cond as f64;
        assert!((p - 100.0 / 101.0).abs() < 0.02, "P(next = 10) = {p}, want ~0.990");
    }

    #[test]
    fn near_zero_kernel_reduces_to_noise() {
        // sigma_v2, sigma_b2 -> 0 makes K_hat ~ sigma_eps2 I
        let theta = HyperParams::new_unchecked(0.3, 1.0, 1.0, 1e-24, 1e-24, 0.5, 0.5);
        let x = random_design(40, 3, 2);
        let anchors = select_anchors_first(40, 10).unwrap();
        let f = nystrom_factorize(&x, &theta, &anchors).unwrap();
        let y = DVector::from_fn(40, |i, _| (i as f64 * 0.37).sin());
        let sol = lowrank_solve(&f, &y).unwrap();
        assert_relative_eq!(sol, y / 0.3, max_relative = 1e-10);
        assert_relative_eq!(lowrank_logdet(&f), 40.0 * 0.3f64.ln(), max_relative = 1e-10);
        // b = 0 -> 0
        let zero = DVector::zeros(40);
        assert_eq!(lowrank_solve(&f, &zero).unwrap(), zero);
    }

    #[test]
    fn full_rank_matches_dense_oracle() {
        let n = 60;
        let x = random_design(n, 4, 3);
        let theta = HyperParams::new(0.15, 0.9, 1.2, 0.8, 1.1, 0.4, 0.6).unwrap();
        let anchors = select_anchors_first(n, n).unwrap();
        let f = nystrom_factorize(&x, &theta, &anchors).unwrap();
        let dense = DenseGp::build(&x, &theta).unwrap();
        let y = DVector::from_fn(n, |i, _| ((i * i) as f64 * 0.01).cos());
        let lr = lowrank_solve(&f, &y).unwrap();
        let dn = dense.solve(&y);
        assert_relative_eq!(lr, dn, max_relative = 1e-8);
        assert!((lowrank_logdet(&f) - dense.logdet()).abs() / n as f64 <= 1e-8);
    }

    #[test]
    fn scalar_logdet_case() {
        // n = r = 1: log det = log(k + s)
        let x = DMatrix::from_row_slice(1, 2, &[0.3, 0.4]);
        let theta = HyperParams::unit();
        let k = kernel::k_mix(&[0.3, 0.4], &[0.3, 0.4], &theta).unwrap();
        let anchors = select_anchors_first(1, 1).unwrap();
        let f = nystrom_factorize(&x, &theta, &anchors).unwrap();
        assert_relative_eq!(lowrank_logdet(&f), (k + 1.0).ln(), max_relative = 1e-12);
    }

    #[test]
    fn quadratic_form_close_and_frobenius_error_monotone() {
        let n = 200;
        let x = random_design(n, 5, 4);
        let theta = HyperParams::new(0.2, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5).unwrap();
        let y = DVector::from_fn(n, |i, _| ((i as f64) * 0.11).sin());
        let dense = DenseGp::build(&x, &theta).unwrap();
        let dense_quad = y.dot(&dense.solve(&y));

        let km = kernel::kernel_matrix(&x, &theta).unwrap().values;
        let mut prev_err = f64::INFINITY;
        for &r in &[10usize, 25, 50, 100, 200] {
            let anchors = select_anchors_first(n, r).unwrap();
            let f = nystrom_factorize(&x, &theta, &anchors).unwrap();
            if r == 50 {
                let quad = y.dot(&lowrank_solve(&f, &y).unwrap());
                assert!(
                    (quad - dense_quad).abs() / dense_quad.abs() < 0.10,
                    "quadratic form off by more than 10%: {quad} vs {dense_quad}"
                );
            }
            let err = (&km - lowrank_explicit(&f)).norm();
            assert!(
                err <= prev_err * (1.0 + 1e-10),
                "Frobenius error not monotone at r = {r}: {err} > {prev_err}"
            );
            prev_err = err;
        }
    }

    #[test]
    fn factorization_is_deterministic() {
        let x = random_design(50, 3, 8);
        let theta = HyperParams::new(0.1, 1.0, 0.9, 1.1, 1.0, 0.45, 0.55).unwrap();
        let anchors = select_anchors_kmeanspp(&x, 12, 77).unwrap();
        let f1 = nystrom_factorize(&x, &theta, &anchors).unwrap();
        let f2 = nystrom_factorize(&x, &theta, &anchors).unwrap();
        assert_eq!(f1.c, f2.c);
        assert_eq!(f1.w, f2.w);
        assert_eq!(f1.jitter_used, f2.jitter_used);
        let y = DVector::from_fn(50, |i, _| i as f64);
        assert_eq!(lowrank_solve(&f1, &y).unwrap(), lowrank_solve(&f2, &y).unwrap());
        assert_eq!(lowrank_logdet(&f1), lowrank_logdet(&f2));
    }

    #[test]
    fn chol_m_field_factors_m() {
        let x = random_design(30, 3, 5);
        let theta = HyperParams::new(0.25, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5).unwrap();
        let anchors = select_anchors_first(30, 8).unwrap();
        let f = nystrom_factorize(&x, &theta, &anchors).unwrap();
        let lm = f.chol_m();
        let m = &lm * lm.transpose();
        let expect = f.sigma_eps2 * &f.w + f.c.transpose() * &f.c;
        assert_relative_eq!(m, expect, max_relative = 1e-9);
        // jitter guard
        let mean_diag = f.w.diagonal().sum() / 8.0;
        assert!(f.jitter_used <= 1e-4 * mean_diag);
    }

    #[test]
    fn literal_mode_matches_dense_at_full_rank() {
        let n = 40;
        let x = random_design(n, 3, 6);
        let theta = HyperParams::new(0.3, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5).unwrap();
        let anchors = select_anchors_first(n, n).unwrap();
        let lit = literal_factorize(&x, &theta, &anchors).unwrap();
        let dense = DenseGp::build(&x, &theta).unwrap();
        let y = DVector::from_fn(n, |i, _| ((i as f64) * 0.21).cos());
        assert_relative_eq!(lit.solve(&y).unwrap(), dense.solve(&y), max_relative = 1e-6);
        assert!((lit.pseudo_logdet() - dense.logdet()).abs() / n as f64 <= 1e-8);
    }
}
