//! Desk-scale edge-cloud platform: geo/resource-aware scheduling, two-step
//! latency-aware service selection, client-side probing with multi-connection
//! failover, and replicated edge storage with strong or eventual consistency,
//! runnable over TCP or a deterministic emulated network.

pub mod geo;
pub mod netharness;
pub mod proto;
pub mod scheduler;
pub mod storage;
pub mod captain;
pub mod control_plane;
pub mod client_sdk;
pub mod scenario;
