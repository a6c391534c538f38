//! SWAG moment collection over backbone snapshots taken during source
//! training.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::prior::LowRankGaussian;

#[derive(Clone, Debug)]
pub struct SwagState {
    count: usize,
    mean: Vec<f64>,
    sq_mean: Vec<f64>,
    dev_cols: VecDeque<Vec<f64>>,
    k: usize,
}

impl SwagState {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Swag("dimension must be at least 1".into()));
        }
        if k < 2 {
            return Err(Error::Rank(k));
        }
        Ok(Self { count: 0, mean: vec![0.0; d], sq_mean: vec![0.0; d], dev_cols: VecDeque::with_capacity(k), k })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sq_mean(&self) -> &[f64] {
        &self.sq_mean
    }

    /// Stored deviations, oldest first.
    pub fn deviations(&self) -> impl Iterator<Item = &[f64]> {
        self.dev_cols.iter().map(Vec::as_slice)
    }

    /// Absorbs one snapshot. The deviation column is taken against the mean
    /// after this update.
    pub fn update(&mut self, snapshot: &[f64]) -> Result<()> {
        if snapshot.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "snapshot has {} entries, state has {}",
                snapshot.len(),
                self.mean.len()
            )));
        }
        if snapshot.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("swag snapshot".into()));
        }
        let c = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.sq_mean.iter_mut()).zip(snapshot) {
            *m = (c * *m + x) / (c + 1.0);
            *s = (c * *s + x * x) / (c + 1.0);
        }
        self.count += 1;
        if self.dev_cols.len() == self.k {
            self.dev_cols.pop_front();
        }
        self.dev_cols.push_back(snapshot.iter().zip(&self.mean).map(|(x, m)| x - m).collect());
        Ok(())
    }

    /// Produces `(μ, Σ_diag, Q)`; negative variances from cancellation are
    /// clamped to zero.
    pub fn finalize(&self) -> Result<LowRankGaussian> {
        if self.count < 2 || self.dev_cols.len() < self.k {
            return Err(Error::Swag(format!(
                "finalize needs at least {} snapshots (k = {}), got {}",
                self.k.max(2),
                self.k,
                self.count
            )));
        }
        let d = self.mean.len();
        let diag = self.sq_mean.iter().zip(&self.mean).map(|(s, m)| (s - m * m).max(0.0)).collect();
        let mut q = Mat::zeros(d, self.k);
        for (j, col) in self.dev_cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                q[(i, j)] = *v;
            }
        }
        LowRankGaussian::new(self.mean.clone(), diag, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_and_rank_check() {
        let s = SwagState::new(4, 2).unwrap();
        assert_eq!(s.count(), 0);
        assert!(s.mean().iter().chain(s.sq_mean()).all(|v| *v == 0.0));
        assert_eq!(s.deviations().count(), 0);
        assert!(matches!(SwagState::new(4, 1), Err(Error::Rank(1))));
    }

    #[test]
    fn first_snapshot_sets_moments() {
        let mut s = SwagState::new(3, 2).unwrap();
        s.update(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(s.mean(), &[1.0, -2.0, 0.5]);
        assert_eq!(s.sq_mean(), &[1.0, 4.0, 0.25]);
        let devs: Vec<_> = s.deviations().collect();
        assert_eq!(devs, vec![&[0.0, 0.0, 0.0][..]]);
    }

    #[test]
    fn three_scalar_snapshots() {
        let mut s = SwagState::new(1, 2).unwrap();
        for x in [1.0, 2.0, 3.0] {
            s.update(&[x]).unwrap();
        }
        assert!((s.mean()[0] - 2.0).abs() < 1e-15);
        assert!((s.sq_mean()[0] - 14.0 / 3.0).abs() < 1e-14);
        let g = s.finalize().unwrap();
        assert!((g.diag()[0] - 2.0 / 3.0).abs() < 1e-14);
        // last two deviations: 2 − 1.5 and 3 − 2
        assert_eq!(g.q().row(0), &[0.5, 1.0]);
    }

    #[test]
    fn identical_snapshots_have_zero_variance() {
        let mut s = SwagState::new(2, 3).unwrap();
        for _ in 0..3 {
            s.update(&[0.3, 7.0]).unwrap();
        }
        let g = s.finalize().unwrap();
        assert!(g.diag().iter().all(|v| v.abs() < 1e-12));
        assert!(g.q().as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(g.is_degenerate(0.0));
        assert!(!g.is_degenerate(0.1));
    }

    #[test]
    fn eviction_keeps_most_recent_in_order() {
        let mut s = SwagState::new(1, 2).unwrap();
        for x in [1.0, 2.0, 3.0, 4.0] {
            s.update(&[x]).unwrap();
        }
        let devs: Vec<f64> = s.deviations().map(|d| d[0]).collect();
        assert_eq!(devs, vec![3.0 - 2.0, 4.0 - 2.5]);
    }

    #[test]
    fn finalize_requires_k_snapshots() {
        let mut s = SwagState::new(2, 3).unwrap();
        s.update(&[1.0, 1.0]).unwrap();
        s.update(&[2.0, 1.0]).unwrap();
        let err = s.finalize().unwrap_err().to_string();
        assert!(err.contains("at least 3"), "{err}");
    }

    #[test]
    fn length_mismatch() {
        let mut s = SwagState::new(2, 2).unwrap();
        assert!(matches!(s.update(&[1.0]), Err(Error::Dimension(_))));
    }
}
