//! Prior bundle directory:
//!
//! ```text
//! meta.json   {"d": int, "k": int, "epsilon": real}
//! mean.f64    d little-endian f64
//! diag.f64    d little-endian f64
//! q.f64       d·k little-endian f64, row-major by parameter index
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LowRankGaussian;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rawio;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle {
    pub gaussian: LowRankGaussian,
    pub epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    d: usize,
    k: usize,
    epsilon: f64,
}

pub fn save_bundle(dir: &Path, bundle: &PriorBundle) -> Result<()> {
    let g = &bundle.gaussian;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    rawio::write_f64s(&dir.join("mean.f64"), g.mu())?;
    rawio::write_f64s(&dir.join("diag.f64"), g.diag())?;
    rawio::write_f64s(&dir.join("q.f64"), g.q().as_slice())?;
    // meta last: its presence marks a complete bundle
    rawio::write_json(&dir.join("meta.json"), &Meta { d: g.dim(), k: g.rank(), epsilon: bundle.epsilon })
}

pub fn load_bundle(dir: &Path) -> Result<PriorBundle> {
    let meta: Meta = rawio::read_json(&dir.join("meta.json"))?;
    let check = |name: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{name}: {got} values, meta.json implies {want}")))
        }
    };
    let mu = rawio::read_f64s(&dir.join("mean.f64"))?;
    check("mean.f64", mu.len(), meta.d)?;
    let diag = rawio::read_f64s(&dir.join("diag.f64"))?;
    check("diag.f64", diag.len(), meta.d)?;
    let q = rawio::read_f64s(&dir.join("q.f64"))?;
    check("q.f64", q.len(), meta.d * meta.k)?;
    if !(meta.epsilon >= 0.0) {
        return Err(Error::Prior(format!("epsilon {} in meta.json is negative", meta.epsilon)));
    }
    let gaussian = LowRankGaussian::new(mu, diag, Mat::from_vec(meta.d, meta.k, q)?)?;
    Ok(PriorBundle { gaussian, epsilon: meta.epsilon })
}
