#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlprior::linalg::Mat;
use tlprior::prior::LowRankGaussian;

/// Dense Gaussian log-density via an explicit d×d covariance and Cholesky.
pub fn dense_log_density(mu: &[f64], cov: &DMatrix<f64>, w: &[f64]) -> f64 {
    let d = mu.len();
    let chol = cov.clone().cholesky().expect("oracle covariance is PD");
    let r = DVector::from_iterator(d, w.iter().zip(mu).map(|(a, b)| a - b));
    let sol = chol.solve(&r);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (r.dot(&sol) + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// `C = (λ/2)Σ_diag + εI + (λ/2)QQᵀ/(k−1)` assembled straight from the
/// formula, without going through the crate's factor code.
pub fn dense_cov_from_formula(g: &LowRankGaussian, lambda: f64, eps: f64) -> DMatrix<f64> {
    let d = g.dim();
    let k = g.rank();
    let q = DMatrix::from_row_slice(d, k, g.q().as_slice());
    let lr = &q * q.transpose() / (k as f64 - 1.0);
    let diag = DMatrix::from_diagonal(&DVector::from_column_slice(g.diag()));
    diag * (lambda / 2.0) + DMatrix::identity(d, d) * eps + lr * (lambda / 2.0)
}

pub fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, d: usize, k: usize) -> LowRankGaussian {
    let mu = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let diag = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
    let q = Mat::from_vec(d, k, (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    LowRankGaussian::new(mu, diag, q).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central difference of `f` along coordinate `i`, step `1e-5·(1+|x_i|)`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let h = 1e-5 * (1.0 + x[i].abs());
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `‖a − b‖∞ / ‖b‖∞`, the relative error used for gradient checks.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
