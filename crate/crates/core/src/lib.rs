//! Conv-like scale-fusion transformer for variable-length time series.
//!
//! The encoder cuts a univariate series into patches, then repeatedly groups
//! neighbouring patches (halving the temporal axis, doubling channels) until
//! one patch remains. Each level is fused with the level below through
//! cross-attention. Series whose lengths fall into the same geometric
//! interval reach the same depth and end in the same feature space.

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod patching;

pub use error::{Error, ErrorKind, Result};
