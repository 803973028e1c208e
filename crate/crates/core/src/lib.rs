//! Structure-exploiting retrieval over dyadic (query, document) data.
//!
//! The interaction graph is partitioned into balanced clusters
//! ([`partition`]). The clusters drive two things: mining hard negatives
//! from high-affinity neighbor clusters while training a shared-table
//! two-tower embedding model ([`sampler`], [`embed`]), and partitioned
//! nearest neighbor search, where a learned router ([`router`]) picks
//! the clusters whose per-cluster indexes ([`knn`]) get probed ([`pnns`]).
//! [`pipeline`] runs every stage on [`synth`] data and writes the artifacts
//! the `pnns` command line tool reads.

pub mod bench;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod graph;
pub mod knn;
pub mod partition;
pub mod pipeline;
pub mod pnns;
pub mod router;
pub mod sampler;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
