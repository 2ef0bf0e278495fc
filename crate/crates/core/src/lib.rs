//! Deterministic, seedable simulator and algorithm library for building and
//! scheduling strongly connected wireless communication structures under the
//! SINR interference model.
//!
//! The library is organized around a small mathematical kernel ([`model`])
//! that defines links, power assignments, affectance and feasibility; a
//! slotted radio channel ([`sim`]); the distributed initial bi-tree
//! construction ([`init`]); structural measures and verifiers ([`analysis`]);
//! a sampling rescheduler ([`scheduler`]); the capacity-driven tree rebuild
//! ([`capacity`]); brute-force ground truth on small inputs ([`oracle`]); and
//! instance generation plus batch experiment machinery ([`gen`],
//! [`experiment`]).
//!
//! All randomness flows through [`rng::RngStream`]: a run is a pure function
//! of (instance, parameters, seed).

pub mod analysis;
pub mod capacity;
pub mod error;
pub mod experiment;
pub mod gen;
pub mod init;
pub mod io;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod tree;

pub use error::{Error, Result};
pub use model::{Instance, Link, LinkSet, ModelParams, NodeId, PowerAssignment};
pub use tree::BiTree;
