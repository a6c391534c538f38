mod common;

use common::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tlprior::analysis::*;
use tlprior::data::Dataset;
use tlprior::linalg::Mat;
use tlprior::net::{NetArch, NetParams};
use tlprior::prior::PriorSpec;
use tlprior::train::map_loss;

/// One-vs-rest AUROC by counting every positive/negative pair.
fn pairwise_auroc(scores: &Mat, labels: &[usize]) -> Option<f64> {
    let mut per = Vec::new();
    for c in 0..scores.cols() {
        let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| scores[(i, c)]).collect();
        let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != c).map(|i| scores[(i, c)]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        per.push(wins / (pos.len() * neg.len()) as f64);
    }
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

fn scores_strategy() -> impl Strategy<Value = (Mat, Vec<usize>)> {
    (2usize..5, 2usize..50).prop_flat_map(|(c, n)| {
        (
            // coarse grid of values so ties show up
            proptest::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n * c),
            proptest::collection::vec(0..c, n),
        )
            .prop_map(move |(s, y)| (Mat::from_vec(n, c, s).unwrap(), y))
    })
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_definition((scores, labels) in scores_strategy()) {
        let expected = pairwise_auroc(&scores, &labels);
        match auroc_macro(&scores, &labels) {
            Ok(a) => prop_assert!((a.macro_avg - expected.unwrap()).abs() < 1e-12),
            Err(_) => prop_assert!(expected.is_none()),
        }
    }

    #[test]
    fn metrics_invariant_to_sample_order((scores, labels) in scores_strategy(), seed in any::<u64>()) {
        let n = labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed));
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| scores.row(i).to_vec()).collect();
        let s2 = Mat::from_rows(&rows).unwrap();
        let y2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        if let (Ok(a), Ok(b)) = (auroc_macro(&scores, &labels), auroc_macro(&s2, &y2)) {
            prop_assert!((a.macro_avg - b.macro_avg).abs() < 1e-12);
        }
        prop_assert!((nll_mean(&scores, &labels).unwrap() - nll_mean(&s2, &y2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auroc_invariant_to_class_relabelling((scores, labels) in scores_strategy(), seed in any::<u64>()) {
        let c = scores.cols();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng(seed));
        // class k becomes perm[k]; its score column moves with it
        let mut s2 = Mat::zeros(scores.rows(), c);
        for i in 0..scores.rows() {
            for k in 0..c {
                s2.row_mut(i)[perm[k]] = scores[(i, k)];
            }
        }
        let y2: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        if let (Ok(a), Ok(b)) = (auroc_macro(&scores, &labels), auroc_macro(&s2, &y2)) {
            prop_assert!((a.macro_avg - b.macro_avg).abs() < 1e-12);
        }
    }
}

#[test]
fn auroc_hand_cases() {
    let s = Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.4, 0.6]]).unwrap();
    let a = auroc_macro(&s, &[0, 1, 0, 1]).unwrap();
    assert_eq!(a.macro_avg, 1.0);
    let a = auroc_macro(&s, &[1, 0, 1, 0]).unwrap();
    assert_eq!(a.macro_avg, 0.0);
    let three = Mat::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.8, 0.1]]).unwrap();
    let a = auroc_macro(&three, &[0, 1]).unwrap();
    assert_eq!(a.skipped(), vec![2]);
    assert!(auroc_macro(&Mat::from_rows(&[vec![0.5, 0.5]]).unwrap(), &[0]).is_err());
}

#[test]
fn accuracy_and_nll_hand_cases() {
    let p = Mat::from_rows(&[vec![0.7, 0.3], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
    // the tie goes to class 0
    assert_eq!(accuracy(&p, &[0, 0, 0]).unwrap(), 2.0 / 3.0);
    let nll = nll_mean(&p, &[0, 1, 0]).unwrap();
    let expected = (-(0.7f64).ln() - (0.5f64).ln() - PROB_FLOOR.ln()) / 3.0;
    assert!((nll - expected).abs() < 1e-12);
    assert!(accuracy(&p, &[0, 2, 0]).is_err());
}

#[test]
fn spearman_basics() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
}

fn endpoints() -> (NetParams, NetParams, Dataset, Dataset) {
    let arch = NetArch::new(3, vec![5], 3);
    let mut r = rng(31);
    let a = NetParams::init(&arch, 1, None).unwrap();
    let mut b = NetParams::init(&arch, 2, None).unwrap();
    b.head.as_mut_slice().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    let mk = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let xs = Mat::from_vec(n, 3, (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        Dataset::new(xs, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    };
    let train = mk(&mut r, 30);
    let test = mk(&mut r, 40);
    (a, b, train, test)
}

#[test]
fn interpolation_endpoints_are_exact() {
    let (a, b, train, test) = endpoints();
    let spec = PriorSpec::std(1e-3).unwrap();
    let curve = interpolate_eval(&a, &b, DEFAULT_POINTS, &spec, &train, &test).unwrap();
    assert_eq!(curve.alphas.len(), 25);
    let la = map_loss(&a, &train, &spec, train.len()).unwrap();
    let lb = map_loss(&b, &train, &spec, train.len()).unwrap();
    assert!((curve.train_loss[0] - la).abs() < 1e-12);
    assert!((curve.train_loss[24] - lb).abs() < 1e-12);
    assert!((curve.test_nll[0] - evaluate(&a, &test).unwrap().nll).abs() < 1e-12);
    assert!((curve.test_nll[24] - evaluate(&b, &test).unwrap().nll).abs() < 1e-12);
    let dist = a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!((curve.endpoint_distance - dist).abs() < 1e-12);
}

#[test]
fn interpolation_between_equal_endpoints_is_flat() {
    let (a, _, train, test) = endpoints();
    let spec = PriorSpec::std(1e-2).unwrap();
    let curve = interpolate_eval(&a, &a.clone(), 7, &spec, &train, &test).unwrap();
    assert!(curve.train_loss.iter().all(|v| (v - curve.train_loss[0]).abs() < 1e-12));
    assert!(curve.test_nll.iter().all(|v| (v - curve.test_nll[0]).abs() < 1e-12));
    assert_eq!(curve.gap, 0.0);
}

#[test]
fn interpolation_midpoint_is_average() {
    let (a, b, train, test) = endpoints();
    let mid = a.lerp(&b, 0.5).unwrap();
    for ((m, x), y) in mid.flatten().iter().zip(a.flatten()).zip(b.flatten()) {
        assert!((m - (x + y) / 2.0).abs() < 1e-15);
    }
    let spec = PriorSpec::std(0.0).unwrap();
    let curve = interpolate_eval(&a, &b, 3, &spec, &train, &test).unwrap();
    assert!((curve.test_nll[1] - evaluate(&mid, &test).unwrap().nll).abs() < 1e-12);
    assert!(interpolate_eval(&a, &b, 1, &spec, &train, &test).is_err());
}

#[test]
fn gap_arithmetic() {
    let curve = LandscapeCurve {
        alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        train_loss: vec![0.0; 5],
        test_nll: vec![1.0, 0.6, 0.4, 0.4, 0.9],
        endpoint_distance: 8.0,
        gap: 0.0,
    };
    assert_eq!(landscape_gap(&curve, 0.0).unwrap(), 4.0);
    assert_eq!(landscape_gap(&curve, 1.0).unwrap(), 4.0);
    assert_eq!(landscape_gap(&curve, 0.5).unwrap(), 0.0);
    assert!(landscape_gap(&curve, 0.3).is_err());
    let csv = curve.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[2], "alpha,train_loss,test_nll");
    assert_eq!(lines.len(), 8);
}
