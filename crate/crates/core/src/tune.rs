//! Two-stage tuning: grid search on a stratified 4:1 split scored by
//! validation NLL, then a refit of the winning configuration on all `n`
//! examples and evaluation on the test set.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, Metrics};
use crate::data::{self, Dataset, Normalizer, SubsampleMode};
use crate::error::{Error, Result};
use crate::net::NetArch;
use crate::prior::{LowRankGaussian, PriorSpec, PriorVariant};
use crate::seeds::derive_seed;
use crate::train::{self, TrainedModel, TrainerConfig};

/// Log-spaced values `10^from, …, 10^to` (inclusive, integer exponents).
fn decades(from: i32, to: i32) -> Vec<f64> {
    let step = if to >= from { 1 } else { -1 };
    let mut out = Vec::new();
    let mut e = from;
    loop {
        out.push(10f64.powi(e));
        if e == to {
            break;
        }
        e += step;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    /// `0` means no weight decay.
    pub weight_decays: Vec<f64>,
    /// Covariance scales; used by the low-rank prior only.
    #[serde(default)]
    pub lambdas: Vec<f64>,
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub lr: f64,
    pub alpha: f64,
    pub lambda: Option<f64>,
}

impl fmt::Display for HyperConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lr={:e} alpha={:e}", self.lr, self.alpha)?;
        if let Some(l) = self.lambda {
            write!(f, " lambda={l:e}")?;
        }
        Ok(())
    }
}

impl Grid {
    /// Learning rates `1e-1 … 1e-4`, decays `1e-2 … 1e-6` plus none, and for
    /// the low-rank prior `λ ∈ 1e0 … 1e9`. The head decay of the low-rank
    /// prior shares the decay list.
    pub fn default_for(variant: PriorVariant) -> Grid {
        let mut weight_decays = decades(-2, -6);
        weight_decays.push(0.0);
        Grid {
            learning_rates: decades(-1, -4),
            weight_decays,
            lambdas: if variant == PriorVariant::LowRank { decades(0, 9) } else { Vec::new() },
        }
    }

    pub fn validate(&self, variant: PriorVariant) -> Result<()> {
        if self.learning_rates.is_empty() || self.weight_decays.is_empty() {
            return Err(Error::Config("grid needs at least one learning rate and one weight decay".into()));
        }
        if variant == PriorVariant::LowRank && self.lambdas.is_empty() {
            return Err(Error::Config("low-rank grid needs at least one lambda".into()));
        }
        if self.learning_rates.iter().chain(&self.lambdas).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates and lambdas must be positive".into()));
        }
        if self.weight_decays.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("weight decays must be positive or 0 (no decay)".into()));
        }
        Ok(())
    }

    /// Configurations in search order: learning rate outermost, then decay,
    /// then λ.
    pub fn configs(&self, variant: PriorVariant) -> Vec<HyperConfig> {
        let lambdas: Vec<Option<f64>> = if variant == PriorVariant::LowRank {
            self.lambdas.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &alpha in &self.weight_decays {
                for &lambda in &lambdas {
                    out.push(HyperConfig { lr, alpha, lambda });
                }
            }
        }
        out
    }
}

pub fn default_grid(variant: PriorVariant) -> Grid {
    Grid::default_for(variant)
}

/// Source-task ingredients shared by every run of a comparison.
#[derive(Clone, Debug, Default)]
pub struct PriorInputs {
    /// Source weights: prior mean for iso, and the backbone initialization
    /// for every method.
    pub mu: Option<Arc<Vec<f64>>>,
    pub gaussian: Option<Arc<LowRankGaussian>>,
    pub epsilon: f64,
}

impl PriorInputs {
    pub fn from_gaussian(gaussian: Arc<LowRankGaussian>, epsilon: f64) -> Self {
        Self { mu: Some(Arc::new(gaussian.mu().to_vec())), gaussian: Some(gaussian), epsilon }
    }

    pub fn spec(&self, variant: PriorVariant, cfg: &HyperConfig) -> Result<PriorSpec> {
        match variant {
            PriorVariant::Std => PriorSpec::std(cfg.alpha),
            PriorVariant::Iso => {
                let mu = self.mu.clone().ok_or_else(|| Error::Config("iso prior needs a source mean".into()))?;
                PriorSpec::iso(cfg.alpha, mu)
            }
            PriorVariant::LowRank => {
                let g =
                    self.gaussian.clone().ok_or_else(|| Error::Config("low-rank prior needs a prior bundle".into()))?;
                let lambda = cfg.lambda.ok_or_else(|| Error::Config("low-rank config without lambda".into()))?;
                PriorSpec::low_rank(cfg.alpha, lambda, self.epsilon, g)
            }
        }
    }
}

/// One stage-1 grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub index: usize,
    pub config: HyperConfig,
    pub seed: u64,
    /// `+∞` when training diverged.
    pub val_nll: f64,
    pub diverged: bool,
    /// Test metrics of the stage-1 model; never used for selection.
    pub test: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub replicate_id: usize,
    pub variant: PriorVariant,
    pub n: usize,
    pub chosen_config: HyperConfig,
    pub chosen_index: usize,
    pub val_nll: f64,
    pub test_metrics: Metrics,
    pub seed: u64,
    pub refit_seed: u64,
    pub trace_refs: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub result: TrialResult,
    pub stage1: Vec<Stage1Record>,
    pub refit: TrainedModel,
    pub normalizer: Option<Normalizer>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Index of the first strictly smallest value; NaN counts as `+∞`.
pub fn select_best(val_nlls: &[f64]) -> Option<usize> {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut best: Option<usize> = None;
    for (i, &v) in val_nlls.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if key(v) < key(val_nlls[b]) => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Everything a trial needs besides its data.
#[derive(Clone, Debug)]
pub struct TrialSetup<'a> {
    pub variant: PriorVariant,
    pub inputs: &'a PriorInputs,
    pub grid: &'a Grid,
    pub arch: &'a NetArch,
    pub trainer: &'a TrainerConfig,
    /// Standardize features with statistics of the size-`n` set.
    pub normalize: bool,
}

/// Stage 1 on a 4:1 split of `n_set`, stage 2 refit on all of `n_set`.
///
/// Stage-1 and refit runs share the step budget. Grid points run in
/// parallel; selection is a reduction in grid order, so the outcome does not
/// depend on scheduling.
pub fn tune_and_refit(
    n_set: &Dataset,
    test: &Dataset,
    setup: &TrialSetup<'_>,
    replicate_id: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    let variant = setup.variant;
    setup.grid.validate(variant)?;
    let normalizer = setup.normalize.then(|| Normalizer::fit(n_set));
    let prep = |d: &Dataset| -> Result<Dataset> {
        match &normalizer {
            Some(norm) => norm.apply(d),
            None => Ok(d.clone()),
        }
    };
    let full = prep(n_set)?;
    let test = prep(test)?;
    let (train_idx, val_idx) = data::split_indices(&full, derive_seed(seed, &["split"]))?;
    let train_set = full.subset(&train_idx)?;
    let val_set = full.subset(&val_idx)?;
    let init = setup.inputs.mu.as_deref().map(Vec::as_slice);

    let configs = setup.grid.configs(variant);
    let stage1: Vec<Stage1Record> = configs
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| -> Result<Stage1Record> {
            let run_seed = derive_seed(seed, &["stage1", &index.to_string()]);
            let spec = setup.inputs.spec(variant, cfg)?;
            let trainer = TrainerConfig { eta0: cfg.lr, seed: run_seed, swag: None, ..setup.trainer.clone() };
            match train::train_map(&train_set, setup.arch, &spec, &trainer, init) {
                Ok(model) => {
                    let val = analysis::evaluate(&model.params, &val_set)?;
                    let test_m = analysis::evaluate(&model.params, &test)?;
                    let diverged = !val.nll.is_finite();
                    Ok(Stage1Record {
                        index,
                        config: *cfg,
                        seed: run_seed,
                        val_nll: if diverged { f64::INFINITY } else { val.nll },
                        diverged,
                        test: Some(test_m),
                    })
                }
                Err(Error::Diverged { .. }) => Ok(Stage1Record {
                    index,
                    config: *cfg,
                    seed: run_seed,
                    val_nll: f64::INFINITY,
                    diverged: true,
                    test: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let vals: Vec<f64> = stage1.iter().map(|r| r.val_nll).collect();
    let best = select_best(&vals).expect("grid is non-empty");
    let chosen = configs[best];

    let refit_seed = derive_seed(seed, &["refit"]);
    let spec = setup.inputs.spec(variant, &chosen)?;
    let trainer = TrainerConfig { eta0: chosen.lr, seed: refit_seed, swag: None, ..setup.trainer.clone() };
    let refit = train::train_map(&full, setup.arch, &spec, &trainer, init)?;
    let test_metrics = analysis::evaluate(&refit.params, &test)?;

    Ok(TrialOutcome {
        result: TrialResult {
            replicate_id,
            variant,
            n: n_set.len(),
            chosen_config: chosen,
            chosen_index: best,
            val_nll: vals[best],
            test_metrics,
            seed,
            refit_seed,
            trace_refs: Vec::new(),
        },
        stage1,
        refit,
        normalizer,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Mean and range of one metric over replicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self { mean, min, max })
    }
}

impl fmt::Display for MetricSummary {
    /// `mean (min-max)` with two decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2}-{:.2})", self.mean, self.min, self.max)
    }
}

/// Per-metric summaries keyed `accuracy`, `nll`, `auroc_macro`.
pub fn summarize(trials: &[TrialResult]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    let acc: Vec<f64> = trials.iter().map(|t| t.test_metrics.accuracy).collect();
    let nll: Vec<f64> = trials.iter().map(|t| t.test_metrics.nll).collect();
    let auroc: Vec<f64> = trials.iter().filter_map(|t| t.test_metrics.auroc_macro).collect();
    for (name, vals) in [("accuracy", acc), ("nll", nll)] {
        if let Some(s) = MetricSummary::from_values(&vals) {
            out.insert(name.to_string(), s);
        }
    }
    if auroc.len() == trials.len() {
        if let Some(s) = MetricSummary::from_values(&auroc) {
            out.insert("auroc_macro".to_string(), s);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ReplicateSummary {
    pub outcomes: Vec<TrialOutcome>,
    pub summary: BTreeMap<String, MetricSummary>,
}

/// Draws `reps` size-`n` sets from `pool` (seeds `subsample_seed + r`) and
/// runs [`tune_and_refit`] on each. Trial seeds derive from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_replicates(
    pool: &Dataset,
    test: &Dataset,
    n: usize,
    reps: usize,
    mode: SubsampleMode,
    subsample_seed: u64,
    setup: &TrialSetup<'_>,
    seed: u64,
) -> Result<ReplicateSummary> {
    let sets = data::replicate_sets(pool, n, reps, subsample_seed, mode)?;
    let outcomes = sets
        .iter()
        .enumerate()
        .map(|(r, set)| tune_and_refit(set, test, setup, r, derive_seed(seed, &[&r.to_string()])))
        .collect::<Result<Vec<_>>>()?;
    let trials: Vec<TrialResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    Ok(ReplicateSummary { summary: summarize(&trials), outcomes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub config: HyperConfig,
    pub val_nll: f64,
    pub test_nll: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Sorted by validation NLL, ascending.
    pub rows: Vec<SensitivityRow>,
    /// Spearman correlation of validation NLL and test NLL over rows where
    /// both are finite.
    pub spearman_val_test_nll: Option<f64>,
}

pub fn sensitivity_report(stage1: &[Stage1Record]) -> SensitivityReport {
    let mut rows: Vec<SensitivityRow> = stage1
        .iter()
        .map(|r| SensitivityRow {
            config: r.config,
            val_nll: r.val_nll,
            test_nll: r.test.as_ref().map(|m| m.nll),
            test_accuracy: r.test.as_ref().map(|m| m.accuracy),
        })
        .collect();
    rows.sort_by(|a, b| a.val_nll.total_cmp(&b.val_nll));
    let (vals, tests): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| match r.test_nll {
            Some(t) if r.val_nll.is_finite() && t.is_finite() => Some((r.val_nll, t)),
            _ => None,
        })
        .unzip();
    let rho = (vals.len() >= 2).then(|| analysis::spearman(&vals, &tests)).filter(|v| v.is_finite());
    SensitivityReport { rows, spearman_val_test_nll: rho }
}
