use std::time::Duration;

use async_trait::async_trait;
use serde_json::Value;
use tracing::debug;

use crate::netharness::{Endpoint, Handler, SharedTransport};
use crate::proto::{Reply, Target};

/// Stateless router: strips `target` from the envelope and forwards the rest
/// to the addressed manager. Replies pass through byte for byte.
pub struct Beacon {
    id: String,
    net: SharedTransport,
    am: Endpoint,
    spinner: Endpoint,
    cargo_mgr: Endpoint,
    forward_timeout: Duration,
}

impl Beacon {
    pub fn new(id: &str, net: SharedTransport, am: Endpoint, spinner: Endpoint, cargo_mgr: Endpoint) -> Self {
        Beacon {
            id: id.to_string(),
            net,
            am,
            spinner,
            cargo_mgr,
            forward_timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.forward_timeout = timeout;
        self
    }

    fn route(&self, request: &[u8]) -> Result<(&Endpoint, Vec<u8>), Reply> {
        let mut v: Value =
            serde_json::from_slice(request).map_err(|e| Reply::error_code(400, format!("malformed request: {e}")))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Reply::error_code(400, "request must be a JSON object"))?;
        let target = obj
            .remove("target")
            .ok_or_else(|| Reply::error_code(400, "missing target"))?;
        let target: Target =
            serde_json::from_value(target).map_err(|e| Reply::error_code(400, format!("unknown target: {e}")))?;
        if !obj.contains_key("type") {
            return Err(Reply::error_code(400, "missing request type"));
        }
        let dst = match target {
            Target::Am => &self.am,
            Target::Spinner => &self.spinner,
            Target::CargoMgr => &self.cargo_mgr,
        };
        Ok((dst, serde_json::to_vec(&v).expect("value serializes")))
    }
}

#[async_trait]
impl Handler for Beacon {
    async fn handle(&self, from: &str, request: Vec<u8>) -> Vec<u8> {
        let (dst, body) = match self.route(&request) {
            Ok(r) => r,
            Err(reply) => return reply.to_bytes(),
        };
        match self.net.call_with_timeout(&self.id, dst, body, self.forward_timeout).await {
            Ok(bytes) => bytes,
            Err(e) => {
                debug!(from, to = %dst, error = %e, "forward failed");
                Reply::error_code(502, format!("{} unreachable: {e}", dst.node_id)).to_bytes()
            }
        }
    }
}
