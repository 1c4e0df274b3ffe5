//! Transport abstraction with two interchangeable backends: an in-process
//! emulated network (latency matrix, jitter, churn, virtual clock) and real
//! TCP sockets. Everything above this module talks request/reply through
//! [`Transport`] and never assumes ordering across distinct peers.

mod churn;
mod emulated;
mod frame;
mod latency;
mod liveness;
mod signal;
mod tcp;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;

pub use churn::{apply_churn, apply_event, ChurnAction, ChurnEvent, ChurnLogEntry, ChurnScript};
pub use emulated::{EmulatedNet, TraceEntry};
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, MAX_FRAME};
pub use latency::{LatencyMatrix, Link};
pub use liveness::{failed, InflightGuard, Liveness, NodeStatus};
pub use signal::{Epoch, EpochRx};
pub use tcp::TcpNet;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(1000);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("connection refused by {0}")]
    Refused(String),
    #[error("connection reset: {0} went down")]
    Reset(String),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("sender {0} is down")]
    SourceDown(String),
    #[error("address {0} already bound")]
    AddressInUse(String),
    #[error("bad frame: {0}")]
    Frame(String),
    #[error("codec: {0}")]
    Codec(String),
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
}

impl NetError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, NetError::Timeout(_))
    }
}

/// A reachable address owned by a node. In emulated mode `address` is a
/// logical name; with TCP it is `host:port`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub node_id: String,
    pub address: String,
}

impl Endpoint {
    pub fn new(node_id: impl Into<String>, address: impl Into<String>) -> Self {
        Endpoint {
            node_id: node_id.into(),
            address: address.into(),
        }
    }

    /// Endpoint whose address is the node id itself.
    pub fn node(node_id: impl Into<String>) -> Self {
        let id = node_id.into();
        Endpoint {
            address: id.clone(),
            node_id: id,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.address == self.node_id {
            f.write_str(&self.node_id)
        } else {
            write!(f, "{}@{}", self.node_id, self.address)
        }
    }
}

#[async_trait]
pub trait Handler: Send + Sync + 'static {
    async fn handle(&self, from: &str, request: Vec<u8>) -> Vec<u8>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Emulated,
    Tcp,
}

#[async_trait]
pub trait Transport: Send + Sync + 'static {
    /// Starts serving `endpoint` and returns the address actually bound.
    async fn bind(&self, endpoint: Endpoint, handler: Arc<dyn Handler>) -> Result<Endpoint, NetError>;

    fn unbind(&self, address: &str);

    async fn call_with_timeout(
        &self,
        src: &str,
        dst: &Endpoint,
        request: Vec<u8>,
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError>;

    async fn call(&self, src: &str, dst: &Endpoint, request: Vec<u8>) -> Result<Vec<u8>, NetError> {
        self.call_with_timeout(src, dst, request, self.default_timeout()).await
    }

    fn default_timeout(&self) -> Duration;

    fn liveness(&self) -> &Liveness;

    /// Silently drop traffic between two nodes (both directions).
    fn partition(&self, a: &str, b: &str);

    fn heal(&self, a: &str, b: &str);

    fn mode(&self) -> Mode;
}

pub type SharedTransport = Arc<dyn Transport>;

/// JSON request/reply over a transport.
pub async fn rpc<Req, Resp>(
    net: &dyn Transport,
    src: &str,
    dst: &Endpoint,
    req: &Req,
    timeout: Option<Duration>,
) -> Result<Resp, NetError>
where
    Req: Serialize + ?Sized + Sync,
    Resp: DeserializeOwned,
{
    let body = serde_json::to_vec(req).map_err(|e| NetError::Codec(e.to_string()))?;
    let timeout = timeout.unwrap_or_else(|| net.default_timeout());
    let reply = net.call_with_timeout(src, dst, body, timeout).await?;
    serde_json::from_slice(&reply).map_err(|e| NetError::Codec(e.to_string()))
}

/// Milliseconds since a fixed origin; virtual under a paused runtime clock.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Clock { origin: Instant::now() }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    pub fn at(&self, ms: f64) -> Instant {
        self.origin + ms_duration(ms)
    }
}

/// Duration from fractional milliseconds, quantized to microseconds so that
/// float noise never pushes a sleep into the next timer tick.
pub fn ms_duration(ms: f64) -> Duration {
    Duration::from_micros((ms.max(0.0) * 1000.0).round() as u64)
}

/// Builds a current-thread runtime with a paused clock: time only advances
/// when every task is idle, so emulated runs never really sleep.
pub fn virtual_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .expect("build virtual-time runtime")
}

pub fn real_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("build runtime")
}
