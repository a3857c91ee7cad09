//! Single-image deraining with a multi-stream dual-path residual-dense
//! network, plus the synthetic rain pipeline, training loop and metrics
//! needed to train and evaluate it end to end.

pub mod blocks;
pub mod cli;
pub mod data;
pub mod elem;
pub mod error;
pub mod losses;
pub mod network;
pub mod plot;
pub mod training;
pub mod nn;
pub mod util;

pub use error::{Error, Result};
