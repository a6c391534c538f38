use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{LowRankGaussian, PreparedLowRank};
use crate::error::{Error, Result};

/// Which prior the backbone is fine-tuned under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PriorVariant {
    /// Zero-mean isotropic prior: plain weight decay.
    #[serde(rename = "std")]
    Std,
    /// Isotropic prior centred on the source weights.
    #[serde(rename = "iso")]
    Iso,
    /// Source mean with the learned low-rank-plus-diagonal covariance.
    #[serde(rename = "lr")]
    LowRank,
}

impl PriorVariant {
    pub const ALL: [PriorVariant; 3] = [PriorVariant::Std, PriorVariant::Iso, PriorVariant::LowRank];

    pub fn key(self) -> &'static str {
        match self {
            PriorVariant::Std => "std",
            PriorVariant::Iso => "iso",
            PriorVariant::LowRank => "lr",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            PriorVariant::Std => "StdPrior",
            PriorVariant::Iso => "LearnedPriorIso",
            PriorVariant::LowRank => "LearnedPriorLR",
        }
    }
}

impl fmt::Display for PriorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PriorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(PriorVariant::Std),
            "iso" => Ok(PriorVariant::Iso),
            "lr" => Ok(PriorVariant::LowRank),
            other => Err(Error::Config(format!("unknown method {other:?}; expected std, iso or lr"))),
        }
    }
}

/// A fully specified prior for one training run.
///
/// `alpha` is the weight-decay coefficient. It always penalizes the head, and
/// for `Std`/`Iso` it also penalizes the backbone, which is MAP estimation
/// under `N(·, τI)` with `τ = 1/(nα)`. The covariance scale of those two
/// variants is tied to `α` and is not a separate knob.
#[derive(Clone, Debug)]
pub struct PriorSpec {
    variant: PriorVariant,
    alpha: f64,
    lambda: Option<f64>,
    epsilon: f64,
    gaussian: Option<Arc<LowRankGaussian>>,
    mu_iso: Option<Arc<Vec<f64>>>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Prior(format!("alpha must be finite and non-negative, got {alpha}")))
    }
}

impl PriorSpec {
    pub fn std(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { variant: PriorVariant::Std, alpha, lambda: None, epsilon: 0.0, gaussian: None, mu_iso: None })
    }

    pub fn iso(alpha: f64, mu: Arc<Vec<f64>>) -> Result<Self> {
        check_alpha(alpha)?;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("iso prior mean".into()));
        }
        Ok(Self { variant: PriorVariant::Iso, alpha, lambda: None, epsilon: 0.0, gaussian: None, mu_iso: Some(mu) })
    }

    pub fn low_rank(alpha: f64, lambda: f64, epsilon: f64, gaussian: Arc<LowRankGaussian>) -> Result<Self> {
        check_alpha(alpha)?;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Prior(format!("lambda must be positive, got {lambda}")));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Prior(format!("epsilon must be non-negative, got {epsilon}")));
        }
        if !(epsilon + gaussian.min_diag() > 0.0) && gaussian.dim() > 0 {
            return Err(Error::Prior(format!(
                "epsilon + min(diag) = {} leaves the covariance singular",
                epsilon + gaussian.min_diag()
            )));
        }
        Ok(Self {
            variant: PriorVariant::LowRank,
            alpha,
            lambda: Some(lambda),
            epsilon,
            gaussian: Some(gaussian),
            mu_iso: None,
        })
    }

    pub fn variant(&self) -> PriorVariant {
        self.variant
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Covariance scale; only the low-rank variant carries one.
    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gaussian(&self) -> Option<&Arc<LowRankGaussian>> {
        self.gaussian.as_ref()
    }

    pub fn mu_iso(&self) -> Option<&Arc<Vec<f64>>> {
        self.mu_iso.as_ref()
    }

    /// The source mean, when the prior has one.
    pub fn mean(&self) -> Option<&[f64]> {
        match self.variant {
            PriorVariant::Std => None,
            PriorVariant::Iso => self.mu_iso.as_deref().map(Vec::as_slice),
            PriorVariant::LowRank => self.gaussian.as_deref().map(LowRankGaussian::mu),
        }
    }

    /// Prior variance `τ = 1/(nα)` implied by weight decay `α` on `n`
    /// examples; infinite when `α = 0`.
    pub fn tau(&self, n: usize) -> f64 {
        1.0 / (n as f64 * self.alpha)
    }

    /// Factorizes whatever the prior needs for repeated evaluation.
    pub fn prepare(&self) -> Result<PreparedPrior> {
        Ok(match self.variant {
            PriorVariant::Std => PreparedPrior::Isotropic { mu: None },
            PriorVariant::Iso => PreparedPrior::Isotropic { mu: self.mu_iso.clone() },
            PriorVariant::LowRank => {
                let g = self.gaussian.as_ref().expect("low-rank spec always carries a gaussian");
                PreparedPrior::LowRank(Arc::new(g.prepare(self.lambda.unwrap_or(1.0), self.epsilon)?))
            }
        })
    }
}

/// Backbone prior ready for per-step evaluation.
#[derive(Clone, Debug)]
pub enum PreparedPrior {
    Isotropic { mu: Option<Arc<Vec<f64>>> },
    LowRank(Arc<PreparedLowRank>),
}
