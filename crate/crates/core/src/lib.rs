//! Deterministic single-machine simulator of a cached-embedding distributed
//! training system for CTR models.
//!
//! The crate models a three-stage training loop:
//!
//! * a data loader that produces global batches and deduplicates their
//!   feature ids ([`dataio`]),
//! * a host manager that owns the full embedding table and admits/evicts
//!   working parameters into fixed-capacity per-worker buffers ([`hostmgr`]),
//! * worker lanes that synchronize embeddings and gradients through a
//!   simulated all-reduce and apply lazy sparse Adam updates ([`worker`]),
//!
//! wired together by [`pipeline`] either concurrently or sequentially.
//! Byte traffic is charged analytically to a [`comm::TransferLedger`].

pub mod comm;
pub mod config;
pub mod dataio;
mod error;
pub mod experiments;
pub mod hostmgr;
pub mod ids;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod worker;

pub use comm::{allreduce_bytes, LedgerSnapshot, TransferLedger};
pub use config::{AdamConfig, DataSource, Mode, SimConfig, Strategy};
pub use dataio::{virtual_sparse_id, DedupBatch, RawBatch};
pub use error::{Error, Result};
pub use ids::{FeatureId, SlotId, VirtualId};
pub use pipeline::{run, Simulator, Stage};
pub use report::RunReport;
