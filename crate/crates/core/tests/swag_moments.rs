mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use tlprior::swag::SwagState;

/// Two-pass batch moments.
fn batch_moments(snaps: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = snaps[0].len();
    let n = snaps.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| snaps.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let sq: Vec<f64> = (0..d).map(|i| snaps.iter().map(|s| s[i] * s[i]).sum::<f64>() / n).collect();
    (mean, sq)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn ten_snapshots_at_d8() {
    let mut r = rng(3);
    let snaps: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
    let mut s = SwagState::new(8, 5).unwrap();
    for x in &snaps {
        s.update(x).unwrap();
    }
    let (mean, sq) = batch_moments(&snaps);
    let g = s.finalize().unwrap();
    for i in 0..8 {
        assert!(rel(g.mu()[i], mean[i]) < 1e-12);
        assert!(rel(g.diag()[i], sq[i] - mean[i] * mean[i]) < 1e-12);
    }
    assert_eq!(g.rank(), 5);
}

proptest! {
    #[test]
    fn streaming_equals_batch(seed in any::<u64>(), d in 1usize..10, count in 2usize..40, k in 2usize..6) {
        let mut r = rng(seed);
        let snaps: Vec<Vec<f64>> = (0..count).map(|_| (0..d).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let mut s = SwagState::new(d, k).unwrap();
        for x in &snaps {
            s.update(x).unwrap();
        }
        let (mean, sq) = batch_moments(&snaps);
        for i in 0..d {
            prop_assert!(rel(s.mean()[i], mean[i]) < 1e-12);
            prop_assert!(rel(s.sq_mean()[i], sq[i]) < 1e-12);
            prop_assert!(s.sq_mean()[i] - s.mean()[i] * s.mean()[i] >= -1e-9);
        }
        prop_assert_eq!(s.deviations().count(), k.min(count));
        if count >= k {
            let g = s.finalize().unwrap();
            prop_assert!(g.diag().iter().all(|v| *v >= 0.0));
            prop_assert_eq!(g.q().cols(), k);
        }
    }
}
