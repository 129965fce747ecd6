//! # hopon-core
//!
//! Control-plane library and deterministic discrete-event simulator for
//! end-to-end network slices ("virtual networks", VNs) that endpoints can
//! *hop on*: once a slice is composed and deployed, a registered device sends
//! packets carrying only a VN ID and the destination's name, and pre-configured
//! VN routers steer them tunnel by tunnel to the destination.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and all IO
//! live in the `hopon` companion crate.
//!
//! ## Layout
//!
//! - [`infra`]: physical infrastructure (network nodes, links, clusters,
//!   domains) and ranked loop-free path queries.
//! - [`slice`]: declarative slice descriptions and their validation.
//! - [`compose`]: slice composition. Derives VN-router configs and routing
//!   tables, maps tunnels onto physical paths, splits latency budgets and
//!   admits slices.
//! - [`cm`]: hierarchical connectivity management (name-based location
//!   tracking and resolution).
//! - [`op`]: slice operation data plane: VN routing, open-tunnel selection,
//!   per-format header processing, rate splitting and access-link scheduling.
//! - [`endpoint`]: device/server registration ladder, service admission,
//!   hop-on send and mobility.
//! - [`sim`]: the discrete-event engine, metrics and the session-establishment
//!   baseline.

#![no_std]
#![deny(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cm;
pub mod compose;
pub mod endpoint;
pub mod ids;
pub mod infra;
pub mod op;
pub mod report;
pub mod sim;
pub mod slice;

pub use ids::{ClusterId, DomainId, LinkId, NnId, OpenTunnelId, RouterId, TunnelId, VnId, VnNodeId};
pub use report::{Finding, Severity, ValidationReport};
