//! Collaborative multi-agent deep Q-learning for joint active box search.
//!
//! Two (or more) agents search a synthetic scene for spatially correlated
//! targets by transforming bounding boxes. Their Q-networks exchange gated
//! messages through cross connections, trained with joint exploitation
//! sampling and a virtual-agent decomposition with per-channel replay pools.

pub mod environment;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod learner;
pub mod numerics;
pub mod qnet;

pub use error::{Error, Result};
