//! Gaussian priors over the backbone weights.
//!
//! The source-informed prior has covariance `λΣ` with
//! `Σ = ½(Σ_diag + Σ_LR)` and `Σ_LR = QQᵀ/(k−1)`, plus a variance floor
//! `εI`. Scaling `Q` by `sqrt(λ / (2(k−1)))` keeps the low-rank part linear in
//! `λ`, so the effective covariance is
//!
//! ```text
//! C = Diag(D) + AAᵀ,   D = (λ/2)·diag + ε,   A = sqrt(λ / (2(k−1)))·Q
//! ```
//!
//! Everything is evaluated through the Woodbury identity and the matrix
//! determinant lemma in `O(dk² + k³)`; no `d×d` matrix is ever formed except
//! by [`LowRankGaussian::dense_covariance`], which exists for tests.

mod bundle;
mod spec;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

pub use bundle::{load_bundle, save_bundle, PriorBundle};
pub use spec::{PreparedPrior, PriorSpec, PriorVariant};

/// Variance floor used when none is configured.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Rank used for the low-rank factor at full scale (a ResNet-50 backbone has
/// d ≈ 23.5M, giving a 23.5M × 5 factor).
pub const DEFAULT_RANK: usize = 5;

/// Largest dimension for which [`LowRankGaussian::dense_covariance`] runs.
pub const DENSE_LIMIT: usize = 1024;

/// Source-learned Gaussian ingredients: mean, diagonal variances and the
/// `d×k` deviation factor.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussian {
    mu: Vec<f64>,
    diag: Vec<f64>,
    q: Mat,
}

impl LowRankGaussian {
    /// Validates and assembles a prior. `q` is `d×k` with one row per
    /// parameter; its column count is the rank.
    pub fn new(mu: Vec<f64>, diag: Vec<f64>, q: Mat) -> Result<Self> {
        let d = mu.len();
        if diag.len() != d || q.rows() != d {
            return Err(Error::Dimension(format!("mu has {d} entries, diag {}, q {} rows", diag.len(), q.rows())));
        }
        if q.cols() < 2 {
            return Err(Error::Rank(q.cols()));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mu".into()));
        }
        if diag.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("diag".into()));
        }
        if !q.is_finite() {
            return Err(Error::NonFinite("q".into()));
        }
        if let Some((index, &value)) = diag.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::NegativeDiagonal { index, value });
        }
        Ok(Self { mu, diag, q })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn min_diag(&self) -> f64 {
        self.diag.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// True when the effective variance floor `ε + min(diag)` is numerically
    /// zero, e.g. after collecting identical snapshots with `ε = 0`.
    pub fn is_degenerate(&self, epsilon: f64) -> bool {
        self.dim() > 0 && epsilon + self.min_diag() <= 1e-12
    }

    /// Returns `(D, A)` with `C = Diag(D) + AAᵀ`.
    pub fn effective_cov_factors(&self, lambda: f64, epsilon: f64) -> Result<(Vec<f64>, Mat)> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Prior(format!("lambda must be positive, got {lambda}")));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Prior(format!("epsilon must be non-negative, got {epsilon}")));
        }
        let d: Vec<f64> = self.diag.iter().map(|s| 0.5 * lambda * s + epsilon).collect();
        if let Some((index, &value)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::SingularCovariance { index, value });
        }
        let scale = (lambda / (2.0 * (self.rank() - 1) as f64)).sqrt();
        Ok((d, self.q.scaled(scale)))
    }

    /// Factorizes the effective covariance once so that repeated density and
    /// gradient evaluations cost `O(dk)`.
    pub fn prepare(&self, lambda: f64, epsilon: f64) -> Result<PreparedLowRank> {
        let (d, a) = self.effective_cov_factors(lambda, epsilon)?;
        PreparedLowRank::new(self.mu.clone(), d, a)
    }

    pub fn log_density(&self, w: &[f64], lambda: f64, epsilon: f64) -> Result<f64> {
        self.prepare(lambda, epsilon)?.log_density(w)
    }

    pub fn grad_log_density(&self, w: &[f64], lambda: f64, epsilon: f64) -> Result<Vec<f64>> {
        self.prepare(lambda, epsilon)?.grad_log_density(w)
    }

    /// Draws `μ + sqrt(D)⊙z₁ + A·z₂`, with `z₁` (length d) drawn before `z₂`
    /// (length k) from a ChaCha8 stream seeded by `seed`.
    pub fn sample(&self, lambda: f64, epsilon: f64, seed: u64) -> Result<Vec<f64>> {
        let (d, a) = self.effective_cov_factors(lambda, epsilon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z2: Vec<f64> = (0..self.rank()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let low_rank = a.matvec(&z2);
        Ok(self
            .mu
            .iter()
            .zip(&d)
            .zip(z1.iter().zip(&low_rank))
            .map(|((m, di), (z, l))| m + di.sqrt() * z + l)
            .collect())
    }

    /// Explicit `C = Diag(D) + AAᵀ`. Only for `d ≤ DENSE_LIMIT`.
    pub fn dense_covariance(&self, lambda: f64, epsilon: f64) -> Result<Mat> {
        let n = self.dim();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge(n));
        }
        let (d, a) = self.effective_cov_factors(lambda, epsilon)?;
        let mut c = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = linalg::dot(a.row(i), a.row(j));
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
            c[(i, i)] += d[i];
        }
        Ok(c)
    }
}

/// A factorized `N(μ, Diag(D) + AAᵀ)`.
#[derive(Clone, Debug)]
pub struct PreparedLowRank {
    mu: Vec<f64>,
    inv_d: Vec<f64>,
    a: Mat,
    /// Lower Cholesky factor of `I_k + AᵀD⁻¹A`.
    inner: Mat,
    log_det: f64,
}

impl PreparedLowRank {
    pub fn new(mu: Vec<f64>, d: Vec<f64>, a: Mat) -> Result<Self> {
        let n = mu.len();
        if d.len() != n || a.rows() != n {
            return Err(Error::Dimension(format!("mean has {n} entries, D {}, A {} rows", d.len(), a.rows())));
        }
        let k = a.cols();
        let inv_d: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        let mut m = Mat::identity(k);
        for (row, &s) in (0..n).map(|i| a.row(i)).zip(&inv_d) {
            for p in 0..k {
                let rp = row[p] * s;
                if rp == 0.0 {
                    continue;
                }
                for q in 0..=p {
                    m[(p, q)] += rp * row[q];
                }
            }
        }
        for p in 0..k {
            for q in 0..p {
                m[(q, p)] = m[(p, q)];
            }
        }
        let inner = linalg::cholesky(&m).ok_or(Error::InnerFactorization)?;
        let log_det = d.iter().map(|v| v.ln()).sum::<f64>() + 2.0 * (0..k).map(|i| inner[(i, i)].ln()).sum::<f64>();
        Ok(Self { mu, inv_d, a, inner, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// `log det C`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `C⁻¹ r` via Woodbury:
    /// `D⁻¹r − D⁻¹A (I + AᵀD⁻¹A)⁻¹ AᵀD⁻¹r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let dr: Vec<f64> = r.iter().zip(&self.inv_d).map(|(x, s)| x * s).collect();
        let t = self.a.matvec_t(&dr);
        let u = linalg::cholesky_solve(&self.inner, &t);
        let au = self.a.matvec(&u);
        dr.iter().zip(&au).zip(&self.inv_d).map(|((x, y), s)| x - s * y).collect()
    }

    fn residual(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.dim() {
            return Err(Error::Dimension(format!("w has {} entries, prior has {}", w.len(), self.dim())));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("w".into()));
        }
        Ok(w.iter().zip(&self.mu).map(|(a, b)| a - b).collect())
    }

    /// `(w−μ)ᵀ C⁻¹ (w−μ)`.
    pub fn mahalanobis_sq(&self, w: &[f64]) -> Result<f64> {
        let r = self.residual(w)?;
        Ok(linalg::dot(&r, &self.solve(&r)))
    }

    pub fn log_density(&self, w: &[f64]) -> Result<f64> {
        let quad = self.mahalanobis_sq(w)?;
        Ok(-0.5 * (quad + self.log_det + self.dim() as f64 * (2.0 * PI).ln()))
    }

    /// `−C⁻¹(w−μ)`.
    pub fn grad_log_density(&self, w: &[f64]) -> Result<Vec<f64>> {
        let r = self.residual(w)?;
        Ok(self.solve(&r).into_iter().map(|v| -v).collect())
    }
}
