//! TimeMIL: multiple instance learning for multivariate time series
//! classification with wavelet positional encoding.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod model;
pub mod params;
pub mod pooling;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use config::{load_config, AttentionMode, RunConfig};
pub use data::{load_checkpoint, parse_ts, save_checkpoint, write_ts, Bag, DatasetMeta};
pub use error::{Error, Result};
pub use model::{ForwardOptions, TimeMil};
pub use tensor::{Graph, Real, Tensor, Var};
