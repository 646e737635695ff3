//! Part-prototype cross-modal person re-identification with bidirectional
//! multi-step domain generalization, on a synthetic visible/infrared
//! benchmark.

pub mod backbone;
pub mod bmdg;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod miverify;
pub mod params;
pub mod protodisc;
pub mod synthdata;

pub use config::{Directionality, MixingMode, TrainConfig};
pub use error::{Error, Result};
