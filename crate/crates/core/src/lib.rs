//! Transfer learning by MAP estimation under three backbone priors: plain
//! weight decay, an isotropic prior centred on source weights, and a
//! source-learned low-rank-plus-diagonal Gaussian built with SWAG.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod net;
pub mod prior;
pub mod rawio;
pub mod seeds;
pub mod swag;
pub mod train;
pub mod tune;

pub use error::{Error, Result};

/// Version string stamped into every results record.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
