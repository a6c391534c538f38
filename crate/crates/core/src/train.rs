//! MAP objectives for the three priors and their SGD/Nesterov optimizer
//! with cosine annealing, plus source pre-training with SWAG collection.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::net::{NetArch, NetParams};
use crate::prior::{LowRankGaussian, PreparedPrior, PriorSpec, PriorVariant};
use crate::rawio;
use crate::swag::SwagState;

fn default_steps() -> usize {
    6000
}
fn default_batch_size() -> usize {
    128
}
fn default_eta0() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_swag_freq() -> usize {
    50
}
fn default_burn_in() -> f64 {
    0.5
}
fn default_rank() -> usize {
    crate::prior::DEFAULT_RANK
}

/// When SWAG snapshots are taken during source training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwagSchedule {
    /// Optimizer steps between snapshots.
    #[serde(default = "default_swag_freq")]
    pub freq: usize,
    /// Fraction of training skipped before the first snapshot.
    #[serde(default = "default_burn_in")]
    pub burn_in_frac: f64,
    #[serde(default = "default_rank")]
    pub rank: usize,
}

impl Default for SwagSchedule {
    fn default() -> Self {
        Self { freq: default_swag_freq(), burn_in_frac: default_burn_in(), rank: default_rank() }
    }
}

impl SwagSchedule {
    fn burn_in_steps(&self, steps: usize) -> usize {
        (self.burn_in_frac * steps as f64).floor() as usize
    }

    /// Whether a snapshot is taken after `completed` optimizer steps.
    pub fn is_snapshot_step(&self, completed: usize, steps: usize) -> bool {
        let start = self.burn_in_steps(steps);
        completed > start && (completed - start).is_multiple_of(self.freq)
    }

    pub fn snapshot_count(&self, steps: usize) -> usize {
        (steps - self.burn_in_steps(steps).min(steps)) / self.freq
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Effective batch is `min(batch_size, n)`.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default)]
    pub eta_min: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub swag: Option<SwagSchedule>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch_size(),
            eta0: default_eta0(),
            eta_min: 0.0,
            momentum: default_momentum(),
            seed: 0,
            swag: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.eta_min >= 0.0) {
            return Err(Error::Config(format!("eta_min must be non-negative, got {}", self.eta_min)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(s) = &self.swag {
            if s.freq == 0 || !(0.0..1.0).contains(&s.burn_in_frac) {
                return Err(Error::Config("swag needs freq >= 1 and burn_in_frac in [0, 1)".into()));
            }
            if s.rank < 2 {
                return Err(Error::Rank(s.rank));
            }
        }
        Ok(())
    }
}

/// `eta_min + ½(eta0 − eta_min)(1 + cos(π·t/total))`.
pub fn cosine_lr(t: usize, total: usize, eta0: f64, eta_min: f64) -> f64 {
    eta_min + 0.5 * (eta0 - eta_min) * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// One Nesterov step on a flat buffer: `v ← m·v + g`, `θ ← θ − lr·(g + m·v)`.
pub fn sgd_nesterov_step(velocity: &mut [f64], params: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((v, p), &g) in velocity.iter_mut().zip(params.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// Velocity buffers for backbone and head.
#[derive(Clone, Debug)]
pub struct OptState {
    pub velocity_w: Vec<f64>,
    pub velocity_v: Vec<f64>,
}

impl OptState {
    pub fn new(params: &NetParams) -> Self {
        Self { velocity_w: vec![0.0; params.backbone.len()], velocity_v: vec![0.0; params.head.as_slice().len()] }
    }

    pub fn step(&mut self, params: &mut NetParams, grad_w: &[f64], grad_v: &Mat, lr: f64, momentum: f64) {
        sgd_nesterov_step(&mut self.velocity_w, &mut params.backbone, grad_w, lr, momentum);
        sgd_nesterov_step(&mut self.velocity_v, params.head.as_mut_slice(), grad_v.as_slice(), lr, momentum);
    }
}

/// A MAP objective with its prior factorized once.
///
/// ```text
/// Std : CE + α/2‖w‖²               + α/2‖vec V‖²
/// Iso : CE + α/2‖w − μ‖²           + α/2‖vec V‖²
/// LR  : CE − (1/n)·log N(w|μ, C)   + α/2‖vec V‖²
/// ```
///
/// The low-rank variant never applies weight decay to `w`.
#[derive(Clone, Debug)]
pub struct Objective {
    variant: PriorVariant,
    alpha: f64,
    n: usize,
    prior: PreparedPrior,
}

impl Objective {
    pub fn new(spec: &PriorSpec, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("objective needs n >= 1".into()));
        }
        Ok(Self { variant: spec.variant(), alpha: spec.alpha(), n, prior: spec.prepare()? })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check(&self, params: &NetParams) -> Result<()> {
        let d = params.backbone.len();
        let prior_d = match &self.prior {
            PreparedPrior::Isotropic { mu: Some(mu) } => mu.len(),
            PreparedPrior::Isotropic { mu: None } => d,
            PreparedPrior::LowRank(p) => p.dim(),
        };
        if prior_d != d {
            return Err(Error::Dimension(format!("prior has {prior_d} entries, backbone {d}")));
        }
        Ok(())
    }

    /// Backbone prior term and its gradient.
    pub fn backbone_penalty(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        match &self.prior {
            PreparedPrior::Isotropic { mu } => {
                let r: Vec<f64> = match mu {
                    Some(mu) => w.iter().zip(mu.iter()).map(|(a, b)| a - b).collect(),
                    None => w.to_vec(),
                };
                let value = 0.5 * self.alpha * linalg::norm_sq(&r);
                Ok((value, r.into_iter().map(|v| self.alpha * v).collect()))
            }
            PreparedPrior::LowRank(p) => {
                let inv_n = 1.0 / self.n as f64;
                let value = -inv_n * p.log_density(w)?;
                let grad = p.grad_log_density(w)?.into_iter().map(|g| -inv_n * g).collect();
                Ok((value, grad))
            }
        }
    }

    fn head_penalty(&self, head: &Mat) -> f64 {
        0.5 * self.alpha * linalg::norm_sq(head.as_slice())
    }

    /// Full objective over `data`.
    pub fn loss(&self, params: &NetParams, data: &Dataset) -> Result<f64> {
        self.check(params)?;
        let ce = params.loss_grad_batch(data.features(), data.labels())?.ce;
        let (pw, _) = self.backbone_penalty(&params.backbone)?;
        Ok(ce + pw + self.head_penalty(&params.head))
    }

    /// Objective value on the rows `idx` (cross-entropy averaged over the
    /// batch, prior terms exact) and its gradient.
    pub fn loss_grad(&self, params: &NetParams, data: &Dataset, idx: &[usize]) -> Result<(f64, Vec<f64>, Mat)> {
        self.check(params)?;
        let mut lg = params.loss_grad_indices(data.features(), data.labels(), idx)?;
        let (pw, gw) = self.backbone_penalty(&params.backbone)?;
        linalg::axpy(1.0, &gw, &mut lg.grad_w);
        linalg::axpy(self.alpha, params.head.as_slice(), lg.grad_v.as_mut_slice());
        Ok((lg.ce + pw + self.head_penalty(&params.head), lg.grad_w, lg.grad_v))
    }

    pub fn variant(&self) -> PriorVariant {
        self.variant
    }
}

pub fn map_loss(params: &NetParams, data: &Dataset, spec: &PriorSpec, n: usize) -> Result<f64> {
    Objective::new(spec, n)?.loss(params, data)
}

/// Gradient of [`map_loss`] with the cross-entropy averaged over `batch`.
pub fn map_grad(params: &NetParams, batch: &Dataset, spec: &PriorSpec, n: usize) -> Result<(Vec<f64>, Mat)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, gw, gv) = Objective::new(spec, n)?.loss_grad(params, batch, &idx)?;
    Ok((gw, gv))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Prior hyperparameters echoed into results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEcho {
    pub variant: PriorVariant,
    pub alpha: f64,
    pub lambda: Option<f64>,
    pub epsilon: f64,
    /// `1/(nα)`; `None` when `α = 0`.
    pub tau: Option<f64>,
}

impl PriorEcho {
    pub fn from_spec(spec: &PriorSpec, n: usize) -> Self {
        let tau = spec.tau(n);
        Self {
            variant: spec.variant(),
            alpha: spec.alpha(),
            lambda: spec.lambda(),
            epsilon: spec.epsilon(),
            tau: tau.is_finite().then_some(tau),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: NetParams,
    pub trace: Vec<StepRecord>,
    pub final_train_loss: f64,
    pub config: TrainerConfig,
    pub prior: PriorEcho,
}

impl TrainedModel {
    /// `step,lr,loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{:?},{:?}", r.step, r.lr, r.loss);
        }
        s
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        rawio::write_atomic(path, self.loss_csv().as_bytes())
    }
}

/// Runs exactly `config.steps` minibatch steps over seeded per-epoch
/// permutations (the last short batch of an epoch is kept).
///
/// The backbone starts at `init_backbone`, else at the prior mean when the
/// spec has one, else at a seeded random draw.
pub fn train_map(
    dataset: &Dataset,
    arch: &NetArch,
    spec: &PriorSpec,
    config: &TrainerConfig,
    init_backbone: Option<&[f64]>,
) -> Result<TrainedModel> {
    train_inner(dataset, arch, spec, config, init_backbone, None)
}

fn train_inner(
    dataset: &Dataset,
    arch: &NetArch,
    spec: &PriorSpec,
    config: &TrainerConfig,
    init_backbone: Option<&[f64]>,
    mut swag: Option<&mut SwagState>,
) -> Result<TrainedModel> {
    config.validate()?;
    if dataset.dim() != arch.input_dim || dataset.num_classes() != arch.num_classes {
        return Err(Error::Dimension(format!(
            "dataset has {} features / {} classes, architecture expects {} / {}",
            dataset.dim(),
            dataset.num_classes(),
            arch.input_dim,
            arch.num_classes
        )));
    }
    let n = dataset.len();
    let objective = Objective::new(spec, n)?;
    let mut params = NetParams::init(arch, config.seed, init_backbone.or(spec.mean()))?;
    objective.check(&params)?;
    let mut opt = OptState::new(&params);
    let batch = config.batch_size.min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch).min(n);
        let idx = &order[cursor..end];
        cursor = end;

        let lr = cosine_lr(step, config.steps, config.eta0, config.eta_min);
        let (loss, gw, gv) = objective.loss_grad(&params, dataset, idx)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut params, &gw, &gv, lr, config.momentum);
        if !params.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(StepRecord { step, lr, loss });

        if let (Some(state), Some(schedule)) = (swag.as_deref_mut(), config.swag.as_ref()) {
            if schedule.is_snapshot_step(step + 1, config.steps) {
                state.update(&params.backbone)?;
            }
        }
    }
    let final_train_loss = objective.loss(&params, dataset)?;
    if !final_train_loss.is_finite() {
        return Err(Error::Diverged { step: config.steps });
    }
    Ok(TrainedModel { params, trace, final_train_loss, config: config.clone(), prior: PriorEcho::from_spec(spec, n) })
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub model: TrainedModel,
    pub prior: Arc<LowRankGaussian>,
}

impl PretrainOutput {
    /// The SWAG mean, used as `μ` downstream.
    pub fn mu(&self) -> &[f64] {
        self.prior.mu()
    }
}

/// Trains on the source task under the standard prior with weight decay
/// `alpha`, collecting SWAG snapshots of the backbone per `config.swag`.
pub fn pretrain_source(
    dataset: &Dataset,
    arch: &NetArch,
    alpha: f64,
    config: &TrainerConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    let schedule =
        config.swag.as_ref().ok_or_else(|| Error::Config("source pre-training needs a swag schedule".into()))?;
    let planned = schedule.snapshot_count(config.steps);
    if planned < schedule.rank.max(2) {
        return Err(Error::Swag(format!(
            "schedule yields {planned} snapshots but rank {} needs at least {}; lower swag.freq or burn_in_frac, or raise steps",
            schedule.rank,
            schedule.rank.max(2)
        )));
    }
    let mut state = SwagState::new(arch.backbone_len(), schedule.rank)?;
    let spec = PriorSpec::std(alpha)?;
    let model = train_inner(dataset, arch, &spec, config, None, Some(&mut state))?;
    let prior = Arc::new(state.finalize()?);
    Ok(PretrainOutput { model, prior })
}
