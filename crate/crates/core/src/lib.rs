//! Visual-conditioned music-token generation: feature alignment, a joint
//! visual embedding, a frozen token decoder with a gated condition-prefix
//! adapter, synthetic paired data and rhythm/distribution metrics.

pub mod adaptor;
pub mod alignment;
pub mod cli;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
