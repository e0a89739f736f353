//! Quantized dissensus: competitive gossip on an integer-state agent network
//! whose topology is rewritten by death and duplication events.
//!
//! - [`graph`]: dynamic undirected graph, connectivity and shape queries.
//! - [`protocol`]: the gossip update, delta policies and edge schedulers.
//! - [`events`]: death/duplication patches, the rule catalog and validation.
//! - [`engine`]: the discrete-event loop producing a replayable [`engine::Trace`].
//! - [`analysis`]: invariant checkers, the exhaustive small-system oracle and
//!   pie-diagram frames.
//! - [`trace_io`]: newline-delimited trace and snapshot files.

pub mod analysis;
pub mod engine;
pub mod events;
pub mod graph;
pub mod protocol;
pub mod rng;
pub mod scenario;
pub mod trace_io;

pub use engine::{run, RunConfig, Termination, Trace};
pub use graph::{AgentId, Edge, Topology, TopologyShape};

pub const TOOL_VERSION: &str = concat!("dissensus ", env!("CARGO_PKG_VERSION"));
