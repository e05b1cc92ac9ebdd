//! Resilient persistent object middleware over a simulated key-based
//! peer-to-peer overlay.
//!
//! Application object graphs are addressed by abstract references (GUIDs),
//! their serialized states are content-hashed (PIDs) and replicated across
//! the overlay, and failed objects are transparently re-instantiated from
//! replicas. Everything runs inside a deterministic single-threaded
//! simulation so that node failures, disk wipes and crashes in the middle
//! of a commit can be injected and replayed bit-for-bit.
//!
//! The crate is organized around the storage model: [`keyspace`] defines
//! the 160-bit ring, [`overlay`] the routing and membership machinery,
//! [`store`] the replicated per-node storage substrate, [`directories`]
//! the six typed services on top of it, [`object_model`] the application
//! object graph and its canonical encoding, [`middleware`] the
//! programmer-facing API (naming, resolution, commit), [`policy`] the
//! resilience policy framework, and [`harness`] the scenario runner behind
//! the `pstore` binary.

pub mod directories;
pub mod error;
pub mod harness;
pub mod keyspace;
pub mod middleware;
pub mod object_model;
pub mod overlay;
pub mod policy;
pub mod sim;
pub mod store;

pub use error::{Error, Result};
