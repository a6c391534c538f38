//! Config-driven experiment orchestration behind the `tlprior` binary:
//! source pre-training with SWAG, tuned method comparisons across training
//! sizes, landscape slices and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{self, LandscapeCurve};
use crate::data::{self, Dataset, Normalizer, SubsampleMode, TaskPairSpec};
use crate::error::{Error, Result};
use crate::net::{self, Checkpoint, NetArch};
use crate::prior::{self, PriorBundle, PriorVariant};
use crate::rawio;
use crate::seeds::derive_seed;
use crate::train::{self, TrainerConfig};
use crate::tune::{self, Grid, HyperConfig, MetricSummary, PriorInputs, TrialSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub source: PathBuf,
    pub target_pool: PathBuf,
    pub target_test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic(TaskPairSpec),
    Csv(CsvTask),
}

fn default_pretrain_alpha() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub trainer: TrainerConfig,
    /// Weight decay used on the source task.
    #[serde(default = "default_pretrain_alpha")]
    pub alpha: f64,
}

/// Replacement lists for the default grids; absent fields keep the default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOverride {
    pub learning_rates: Option<Vec<f64>>,
    pub weight_decays: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
}

impl GridOverride {
    pub fn apply(&self, variant: PriorVariant) -> Grid {
        let mut g = Grid::default_for(variant);
        if let Some(v) = &self.learning_rates {
            g.learning_rates = v.clone();
        }
        if let Some(v) = &self.weight_decays {
            g.weight_decays = v.clone();
        }
        if variant == PriorVariant::LowRank {
            if let Some(v) = &self.lambdas {
                g.lambdas = v.clone();
            }
        }
        g
    }
}

/// Which method's objective a landscape slice reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    pub method: PriorVariant,
    /// Training-set size of the slice's objective.
    pub n: usize,
    #[serde(default)]
    pub replicate: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    analysis::DEFAULT_POINTS
}

fn default_true() -> bool {
    true
}

fn default_reps() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    pub arch: NetArch,
    pub methods: Vec<PriorVariant>,
    pub sizes: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub subsample: SubsampleMode,
    /// Standardize features with the statistics of each size-`n` set.
    #[serde(default = "default_true")]
    pub normalize: bool,
    pub trainer: TrainerConfig,
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub grid: GridOverride,
    /// Variance floor for the low-rank prior; defaults to the bundle's.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub landscape: Option<LandscapeConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.trainer.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config("sizes must be a non-empty list of positive counts".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.subsample == SubsampleMode::Balanced {
            if let Some(&n) = self.sizes.iter().find(|&&n| n % self.arch.num_classes != 0) {
                return Err(Error::Config(format!(
                    "size {n} is not divisible by {} classes in balanced mode",
                    self.arch.num_classes
                )));
            }
        }
        if let TaskSource::Synthetic(t) = &self.task {
            t.validate()?;
            if t.dim != self.arch.input_dim || t.num_classes != self.arch.num_classes {
                return Err(Error::Config("task dimension/classes disagree with the architecture".into()));
            }
        }
        for m in &self.methods {
            self.grid.apply(*m).validate(*m)?;
        }
        if let Some(p) = &self.pretrain {
            p.trainer.validate()?;
        }
        Ok(())
    }

    fn with_overrides(mut self, out: Option<&Path>, seed: Option<u64>) -> Self {
        if let Some(o) = out {
            self.output_dir = o.to_path_buf();
        }
        if let Some(s) = seed {
            self.master_seed = s;
        }
        self
    }
}

/// `(source, target_pool, target_test)` for the configured task.
pub fn load_task(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    match &cfg.task {
        TaskSource::Synthetic(spec) => data::gen_task_pair(spec),
        TaskSource::Csv(paths) => {
            let c = Some(cfg.arch.num_classes);
            let load = |p: &Path| -> Result<Dataset> {
                let d = data::load_dataset_csv(p, c)?;
                if d.dim() != cfg.arch.input_dim {
                    return Err(Error::Config(format!(
                        "{} has {} features, arch expects {}",
                        p.display(),
                        d.dim(),
                        cfg.arch.input_dim
                    )));
                }
                Ok(d)
            };
            Ok((load(&paths.source)?, load(&paths.target_pool)?, load(&paths.target_test)?))
        }
    }
}

pub fn bundle_dir(out: &Path) -> PathBuf {
    out.join("prior")
}

fn trial_name(method: PriorVariant, n: usize, rep: usize) -> String {
    format!("{}_n{n}_r{rep}", method.key())
}

/// Seed of the size-`n` replicate draws; shared by all methods so they see
/// the same training sets.
pub fn subsample_seed(master: u64, n: usize) -> u64 {
    derive_seed(master, &["subsample", &n.to_string()])
}

pub fn trial_seed(master: u64, method: PriorVariant, n: usize) -> u64 {
    derive_seed(master, &["trial", method.key(), &n.to_string()])
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub bundle_dir: PathBuf,
    pub bundle: PriorBundle,
    pub final_train_loss: f64,
}

/// Pre-trains on the source task, collects SWAG moments and writes the
/// prior bundle to `<out>/prior`. Refuses to overwrite unless `force`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, force: bool) -> Result<PretrainReport> {
    let pcfg = cfg.pretrain.as_ref().ok_or_else(|| Error::Config("config has no \"pretrain\" section".into()))?;
    let dir = bundle_dir(&cfg.output_dir);
    if dir.join("meta.json").exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds a prior bundle; pass --force to overwrite",
            dir.display()
        )));
    }
    let (source, _, _) = load_task(cfg)?;
    let source = if cfg.normalize { Normalizer::fit(&source).apply(&source)? } else { source };
    let trainer = TrainerConfig { seed: derive_seed(cfg.master_seed, &["pretrain"]), ..pcfg.trainer.clone() };
    let out = train::pretrain_source(&source, &cfg.arch, pcfg.alpha, &trainer)?;
    let epsilon = cfg.epsilon.unwrap_or(prior::DEFAULT_EPSILON);
    let bundle = PriorBundle { gaussian: (*out.prior).clone(), epsilon };
    prior::save_bundle(&dir, &bundle)?;
    out.model.write_loss_csv(&dir.join("pretrain_loss.csv"))?;
    let log = json!({
        "version": crate::VERSION,
        "master_seed": cfg.master_seed,
        "trainer": trainer,
        "alpha": pcfg.alpha,
        "final_train_loss": out.model.final_train_loss,
        "d": bundle.gaussian.dim(),
        "k": bundle.gaussian.rank(),
        "degenerate": bundle.gaussian.is_degenerate(epsilon),
    });
    rawio::write_json(&dir.join("pretrain.json"), &log)?;
    Ok(PretrainReport { bundle_dir: dir, bundle, final_train_loss: out.model.final_train_loss })
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub results_path: PathBuf,
    pub records: Vec<Value>,
    pub tables: String,
}

fn metrics_json(m: &analysis::Metrics) -> Value {
    json!({"accuracy": m.accuracy, "nll": m.nll, "auroc_macro": m.auroc_macro})
}

/// Runs every (method, n, replicate) trial and writes `results.jsonl`,
/// refit traces and checkpoints, and `summary.md`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let out = &cfg.output_dir;
    let needs_prior = cfg.methods.iter().any(|m| *m != PriorVariant::Std);
    let bdir = bundle_dir(out);
    let bundle = if bdir.join("meta.json").exists() {
        Some(prior::load_bundle(&bdir)?)
    } else if needs_prior {
        return Err(Error::Config(format!("no prior bundle at {}; run `tlprior pretrain` first", bdir.display())));
    } else {
        None
    };
    let inputs = match &bundle {
        Some(b) => {
            if b.gaussian.dim() != cfg.arch.backbone_len() {
                return Err(Error::Dimension(format!(
                    "prior bundle has d = {}, architecture has {}",
                    b.gaussian.dim(),
                    cfg.arch.backbone_len()
                )));
            }
            PriorInputs::from_gaussian(Arc::new(b.gaussian.clone()), cfg.epsilon.unwrap_or(b.epsilon))
        }
        None => PriorInputs::default(),
    };
    let (_, pool, test) = load_task(cfg)?;

    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    for &n in &sizes {
        data::subsample_counts(&pool, n, cfg.subsample)?;
    }

    let mut records = vec![json!({
        "kind": "meta",
        "version": crate::VERSION,
        "master_seed": cfg.master_seed,
        "config": cfg,
        "epsilon": inputs.epsilon,
        "assumptions": {
            "head_decay_grid": "the low-rank prior's head decay uses the weight-decay grid",
            "tau": "std/iso weight decay alpha on n examples is a N(0, tau I) prior with tau = 1/(n alpha)",
            "weight_decay_divided_by_lr": false,
            "stage_steps": "stage-1 and refit runs share trainer.steps",
            "init": "every method starts the backbone at the source mean when a bundle is present",
        },
    })];

    for &method in &cfg.methods {
        let grid = cfg.grid.apply(method);
        let setup = TrialSetup {
            variant: method,
            inputs: &inputs,
            grid: &grid,
            arch: &cfg.arch,
            trainer: &cfg.trainer,
            normalize: cfg.normalize,
        };
        for &n in &sizes {
            let summary = tune::run_replicates(
                &pool,
                &test,
                n,
                cfg.reps,
                cfg.subsample,
                subsample_seed(cfg.master_seed, n),
                &setup,
                trial_seed(cfg.master_seed, method, n),
            )?;
            for outcome in &summary.outcomes {
                let r = &outcome.result;
                let name = trial_name(method, n, r.replicate_id);
                let trace_rel = format!("traces/{name}.csv");
                let ckpt_rel = format!("checkpoints/{name}");
                outcome.refit.write_loss_csv(&out.join(&trace_rel))?;
                net::save_checkpoint(
                    &out.join(&ckpt_rel),
                    &Checkpoint { params: outcome.refit.params.clone(), normalizer: outcome.normalizer.clone() },
                )?;
                for s in &outcome.stage1 {
                    records.push(json!({
                        "kind": "stage1",
                        "version": crate::VERSION,
                        "master_seed": cfg.master_seed,
                        "method": method,
                        "n": n,
                        "replicate": r.replicate_id,
                        "config_index": s.index,
                        "lr": s.config.lr,
                        "alpha": s.config.alpha,
                        "lambda": s.config.lambda,
                        "tau": tau_of(s.config.alpha, outcome.train_indices.len()),
                        "seed": s.seed,
                        "trial_seed": r.seed,
                        "val_nll": finite_or_null(s.val_nll),
                        "diverged": s.diverged,
                        "test": s.test.as_ref().map(metrics_json),
                    }));
                }
                records.push(json!({
                    "kind": "trial",
                    "version": crate::VERSION,
                    "master_seed": cfg.master_seed,
                    "method": method,
                    "n": n,
                    "replicate": r.replicate_id,
                    "subsample_seed": subsample_seed(cfg.master_seed, n).wrapping_add(r.replicate_id as u64),
                    "trial_seed": r.seed,
                    "refit_seed": r.refit_seed,
                    "config_index": r.chosen_index,
                    "lr": r.chosen_config.lr,
                    "alpha": r.chosen_config.alpha,
                    "lambda": r.chosen_config.lambda,
                    "tau": tau_of(r.chosen_config.alpha, n),
                    "epsilon": (method == PriorVariant::LowRank).then_some(inputs.epsilon),
                    "val_nll": finite_or_null(r.val_nll),
                    "final_train_loss": outcome.refit.final_train_loss,
                    "test": metrics_json(&r.test_metrics),
                    "trace_refs": [trace_rel, ckpt_rel],
                }));
            }
            let mut rec = json!({
                "kind": "summary",
                "version": crate::VERSION,
                "method": method,
                "n": n,
                "reps": cfg.reps,
            });
            for (metric, s) in &summary.summary {
                rec[metric] = json!({"mean": s.mean, "min": s.min, "max": s.max, "cell": s.to_string()});
            }
            records.push(rec);
        }
    }

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let results_path = out.join("results.jsonl");
    rawio::write_atomic(&results_path, text.as_bytes())?;
    let tables = render_tables(&records)?;
    rawio::write_atomic(&out.join("summary.md"), tables.as_bytes())?;
    Ok(CompareReport { results_path, records, tables })
}

fn tau_of(alpha: f64, n: usize) -> Option<f64> {
    let t = 1.0 / (n as f64 * alpha);
    t.is_finite().then_some(t)
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Accuracy, NLL and AUROC of one trial.
type Cell = (f64, f64, Option<f64>);

/// Markdown tables, one row per method and one column per `n`, each cell
/// `mean (min-max)` over replicates.
pub fn render_tables(records: &[Value]) -> Result<String> {
    let mut cells: BTreeMap<(PriorVariant, usize), Vec<Cell>> = BTreeMap::new();
    for r in records.iter().filter(|r| r["kind"] == "trial") {
        let method: PriorVariant = serde_json::from_value(r["method"].clone())?;
        let n = r["n"].as_u64().ok_or_else(|| Error::Data("trial record without n".into()))? as usize;
        let t = &r["test"];
        let acc = t["accuracy"].as_f64().ok_or_else(|| Error::Data("trial record without accuracy".into()))?;
        let nll = t["nll"].as_f64().ok_or_else(|| Error::Data("trial record without nll".into()))?;
        cells.entry((method, n)).or_default().push((acc, nll, t["auroc_macro"].as_f64()));
    }
    if cells.is_empty() {
        return Err(Error::Data("no trial records found".into()));
    }
    let mut sizes: Vec<usize> = cells.keys().map(|(_, n)| *n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let methods: Vec<PriorVariant> =
        PriorVariant::ALL.into_iter().filter(|m| cells.keys().any(|(k, _)| k == m)).collect();
    let all_auroc = cells.values().flatten().all(|c| c.2.is_some());

    let mut out = String::new();
    let mut table = |title: &str, pick: &dyn Fn(&Cell) -> f64| {
        let _ = writeln!(out, "## {title}\n");
        let header: Vec<String> = sizes.iter().map(|n| format!("n={n}")).collect();
        let _ = writeln!(out, "| method | {} |", header.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(sizes.len()));
        for m in &methods {
            let row: Vec<String> = sizes
                .iter()
                .map(|n| {
                    cells
                        .get(&(*m, *n))
                        .and_then(|v| MetricSummary::from_values(&v.iter().map(pick).collect::<Vec<_>>()))
                        .map_or_else(|| "-".to_string(), |s| s.to_string())
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", m.display_name(), row.join(" | "));
        }
        out.push('\n');
    };
    table("Test accuracy (higher is better)", &|c| c.0);
    table("Test NLL (lower is better)", &|c| c.1);
    if all_auroc {
        table("Test macro AUROC (higher is better)", &|c| c.2.unwrap_or(f64::NAN));
    }
    Ok(out)
}

pub fn read_results(results_dir: &Path) -> Result<Vec<Value>> {
    let path = results_dir.join("results.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

pub fn cmd_report(results_dir: &Path) -> Result<String> {
    render_tables(&read_results(results_dir)?)
}

/// Interpolates between two checkpoints, reporting the configured method's
/// objective on its size-`n` replicate set and the test NLL. Writes
/// `<out>/landscape.csv`.
pub fn cmd_landscape(
    cfg: &ExperimentConfig,
    a: &Path,
    b: &Path,
    points: Option<usize>,
) -> Result<(PathBuf, LandscapeCurve)> {
    let lc = cfg.landscape.as_ref().ok_or_else(|| Error::Config("config has no \"landscape\" section".into()))?;
    let ca = net::load_checkpoint(a)?;
    let cb = net::load_checkpoint(b)?;
    if ca.params.arch() != cb.params.arch() || ca.params.arch() != &cfg.arch {
        return Err(Error::Dimension("checkpoint architectures differ from each other or from the config".into()));
    }
    let (_, pool, test) = load_task(cfg)?;
    let sets =
        data::replicate_sets(&pool, lc.n, lc.replicate + 1, subsample_seed(cfg.master_seed, lc.n), cfg.subsample)?;
    let train_set = sets.into_iter().nth(lc.replicate).expect("replicate drawn");
    let (train_set, test) = match &ca.normalizer {
        Some(norm) => (norm.apply(&train_set)?, norm.apply(&test)?),
        None => (train_set, test),
    };
    let inputs = if lc.method == PriorVariant::Std {
        PriorInputs::default()
    } else {
        let bundle = prior::load_bundle(&bundle_dir(&cfg.output_dir))?;
        PriorInputs::from_gaussian(Arc::new(bundle.gaussian), cfg.epsilon.unwrap_or(bundle.epsilon))
    };
    let spec = inputs.spec(lc.method, &HyperConfig { lr: 0.0, alpha: lc.alpha, lambda: lc.lambda })?;
    let m = points.unwrap_or(lc.points);
    let curve = analysis::interpolate_eval(&ca.params, &cb.params, m, &spec, &train_set, &test)?;
    let path = cfg.output_dir.join("landscape.csv");
    curve.write_csv(&path)?;
    Ok((path, curve))
}

/// Parsed command line, independent of the argument parser.
#[derive(Clone, Debug)]
pub enum Command {
    Pretrain {
        config: PathBuf,
        out: Option<PathBuf>,
        seed: Option<u64>,
        force: bool,
    },
    Compare {
        config: PathBuf,
        out: Option<PathBuf>,
        seed: Option<u64>,
    },
    Landscape {
        config: PathBuf,
        out: Option<PathBuf>,
        seed: Option<u64>,
        points: Option<usize>,
        a: PathBuf,
        b: PathBuf,
    },
    Report {
        results: PathBuf,
    },
}

/// Runs a command and returns the text to print on success.
pub fn run(cmd: Command) -> Result<String> {
    let load = |config: &Path, out: &Option<PathBuf>, seed: Option<u64>| -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(config)?.with_overrides(out.as_deref(), seed))
    };
    match cmd {
        Command::Pretrain { config, out, seed, force } => {
            let cfg = load(&config, &out, seed)?;
            let r = cmd_pretrain(&cfg, force)?;
            Ok(format!(
                "wrote prior bundle {} (d={}, k={}, final source loss {:.4})",
                r.bundle_dir.display(),
                r.bundle.gaussian.dim(),
                r.bundle.gaussian.rank(),
                r.final_train_loss
            ))
        }
        Command::Compare { config, out, seed } => {
            let cfg = load(&config, &out, seed)?;
            let r = cmd_compare(&cfg)?;
            Ok(format!("{}\nwrote {}", r.tables.trim_end(), r.results_path.display()))
        }
        Command::Landscape { config, out, seed, points, a, b } => {
            let cfg = load(&config, &out, seed)?;
            let (path, curve) = cmd_landscape(&cfg, &a, &b, points)?;
            Ok(format!(
                "wrote {} ({} points, endpoint distance {:.4}, gap {:.4})",
                path.display(),
                curve.alphas.len(),
                curve.endpoint_distance,
                curve.gap
            ))
        }
        Command::Report { results } => cmd_report(&results),
    }
}
