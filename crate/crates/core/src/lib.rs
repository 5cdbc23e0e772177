//! Latency-aware structured channel pruning.
//!
//! A model is described by a [`graph::ModelGraph`]; its channel dimensions are
//! partitioned into [`graph::ChannelGroup`]s that are pruned together. The
//! [`search`] module explores pruned sub-models as a beam-searched tree,
//! measuring each candidate's latency through a [`latency::LatencyProvider`]
//! fronted by a persistent [`cache::LatencyCache`], and ranking candidates by
//! the gradient-based channel importance computed in [`importance`].

pub mod cache;
pub mod error;
pub mod executor;
pub mod graph;
pub mod importance;
pub mod latency;
pub mod search;
pub mod toy;

pub use error::{Error, Result};
