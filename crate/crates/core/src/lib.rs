//! Epileptic-wave detection on multichannel SEEG with learned dynamic
//! diffusion graphs.
//!
//! Pipeline: [`data`] segments recordings and builds hierarchical labels,
//! [`bcpc`] pretrains per-channel segment representations, [`graph`] learns
//! cross-time and inner-time diffusion graphs and propagates along them,
//! [`hierarchy`] pools to regions and patient and scores all three levels,
//! and [`train`] fits and evaluates the whole detector. [`synth`] generates
//! recordings with planted propagation for testing.

pub mod bcpc;
pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod error;
pub mod graph;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod params;
pub mod storage;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, ErrorKind, Result};
