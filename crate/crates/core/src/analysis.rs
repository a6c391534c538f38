//! Classification metrics and 1-D loss-landscape slices between two optima.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::NetParams;
use crate::prior::PriorSpec;
use crate::rawio;
use crate::train::Objective;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Interpolation resolution used when none is given.
pub const DEFAULT_POINTS: usize = 25;

fn check_shape(probs: &Mat, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::Metric(format!("{} score rows but {} labels", probs.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::InvalidLabel { label, num_classes: probs.cols() });
    }
    Ok(())
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &Mat, labels: &[usize]) -> Result<f64> {
    check_shape(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|(i, &y)| argmax(probs.row(*i)) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn nll_mean(probs: &Mat, labels: &[usize]) -> Result<f64> {
    check_shape(probs, labels)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -probs[(i, y)].max(PROB_FLOOR).ln()).sum();
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Auroc {
    pub macro_avg: f64,
    /// Per-class AUROC; `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
}

impl Auroc {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_class.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect()
    }
}

/// Average ranks (1-based), ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest AUROC per class via the Mann-Whitney rank statistic (ties
/// count ½), macro-averaged over classes that have both positives and
/// negatives.
pub fn auroc_macro(scores: &Mat, labels: &[usize]) -> Result<Auroc> {
    check_shape(scores, labels)?;
    let mut per_class = Vec::with_capacity(scores.cols());
    for c in 0..scores.cols() {
        let col = scores.col(c);
        let n_pos = labels.iter().filter(|&&y| y == c).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            per_class.push(None);
            continue;
        }
        let ranks = average_ranks(&col);
        let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&y, _)| y == c).map(|(_, r)| r).sum();
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        per_class.push(Some(u / (n_pos * n_neg) as f64));
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Metric("AUROC undefined: no class has both positives and negatives".into()));
    }
    Ok(Auroc { macro_avg: included.iter().sum::<f64>() / included.len() as f64, per_class })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub nll: f64,
    pub auroc_macro: Option<f64>,
}

/// Accuracy, NLL and (when defined) macro AUROC of `params` on `data`.
pub fn evaluate(params: &NetParams, data: &Dataset) -> Result<Metrics> {
    let probs = params.predict_proba_batch(data.features())?;
    Ok(Metrics {
        accuracy: accuracy(&probs, data.labels())?,
        nll: nll_mean(&probs, data.labels())?,
        auroc_macro: auroc_macro(&probs, data.labels()).ok().map(|a| a.macro_avg),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCurve {
    pub alphas: Vec<f64>,
    /// The method's full MAP objective on its training set.
    pub train_loss: Vec<f64>,
    pub test_nll: Vec<f64>,
    /// `‖θ_b − θ_a‖` over backbone and head together.
    pub endpoint_distance: f64,
    pub gap: f64,
}

/// Evaluates the train objective and test NLL along
/// `θ(t) = (1−t)·θ_a + t·θ_b` at `m` evenly spaced `t ∈ [0, 1]`; the gap is
/// measured from the trained optimum at `t = 0`.
pub fn interpolate_eval(
    theta_a: &NetParams,
    theta_b: &NetParams,
    m: usize,
    spec: &PriorSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<LandscapeCurve> {
    if theta_a.arch() != theta_b.arch() {
        return Err(Error::Dimension("endpoints have different architectures".into()));
    }
    if m < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 points, got {m}")));
    }
    let objective = Objective::new(spec, train.len())?;
    let alphas: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
    let mut train_loss = Vec::with_capacity(m);
    let mut test_nll = Vec::with_capacity(m);
    for &t in &alphas {
        let theta = if t == 0.0 {
            theta_a.clone()
        } else if t == 1.0 {
            theta_b.clone()
        } else {
            theta_a.lerp(theta_b, t)?
        };
        train_loss.push(objective.loss(&theta, train)?);
        test_nll.push(evaluate(&theta, test)?.nll);
    }
    let endpoint_distance =
        theta_a.flatten().iter().zip(theta_b.flatten()).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
    let mut curve = LandscapeCurve { alphas, train_loss, test_nll, endpoint_distance, gap: 0.0 };
    curve.gap = landscape_gap(&curve, 0.0)?;
    Ok(curve)
}

/// `|t* − trained_at| · endpoint_distance`, with `t*` the first minimizer of
/// the test NLL along the slice.
pub fn landscape_gap(curve: &LandscapeCurve, trained_at_alpha: f64) -> Result<f64> {
    if !curve.alphas.iter().any(|a| (a - trained_at_alpha).abs() < 1e-12) {
        return Err(Error::Config(format!("{trained_at_alpha} is not a grid point of the slice")));
    }
    let best = argmin_first(&curve.test_nll);
    Ok((curve.alphas[best] - trained_at_alpha).abs() * curve.endpoint_distance)
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

impl LandscapeCurve {
    /// `alpha,train_loss,test_nll` with the distance and gap in leading
    /// `#` comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# endpoint_distance={:?}", self.endpoint_distance);
        let _ = writeln!(s, "# gap={:?}", self.gap);
        s.push_str("alpha,train_loss,test_nll\n");
        for ((a, l), t) in self.alphas.iter().zip(&self.train_loss).zip(&self.test_nll) {
            let _ = writeln!(s, "{a:?},{l:?},{t:?}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        rawio::write_atomic(path, self.to_csv().as_bytes())
    }
}
