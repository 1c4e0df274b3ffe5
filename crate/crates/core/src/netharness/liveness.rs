use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::signal::{Epoch, EpochRx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Up,
    /// Refuses new inbound requests, drains in-flight ones, then goes `Down`.
    Leaving,
    Down,
}

struct NodeLife {
    status: NodeStatus,
    fail_epoch: Arc<Epoch>,
    inflight: usize,
}

impl NodeLife {
    fn new() -> Self {
        NodeLife {
            status: NodeStatus::Up,
            fail_epoch: Epoch::new(),
            inflight: 0,
        }
    }
}

/// Per-node up/leaving/down state shared by both transport backends.
/// Nodes are implicitly `Up` the first time they are referenced.
#[derive(Clone, Default)]
pub struct Liveness {
    nodes: Arc<Mutex<BTreeMap<String, NodeLife>>>,
}

impl Liveness {
    pub fn status(&self, node: &str) -> NodeStatus {
        let mut nodes = self.nodes.lock();
        nodes.entry(node.to_string()).or_insert_with(NodeLife::new).status
    }

    pub fn is_up(&self, node: &str) -> bool {
        self.status(node) == NodeStatus::Up
    }

    /// Crash: in-flight exchanges touching the node are reset.
    pub fn fail(&self, node: &str) {
        let mut nodes = self.nodes.lock();
        let life = nodes.entry(node.to_string()).or_insert_with(NodeLife::new);
        life.status = NodeStatus::Down;
        life.fail_epoch.bump();
    }

    /// Graceful departure: in-flight requests complete, new ones are refused.
    pub fn leave(&self, node: &str) {
        let mut nodes = self.nodes.lock();
        let life = nodes.entry(node.to_string()).or_insert_with(NodeLife::new);
        life.status = if life.inflight == 0 { NodeStatus::Down } else { NodeStatus::Leaving };
    }

    /// Start out down; a later `join` brings the node up.
    pub fn mark_down(&self, node: &str) {
        let mut nodes = self.nodes.lock();
        nodes.entry(node.to_string()).or_insert_with(NodeLife::new).status = NodeStatus::Down;
    }

    pub fn join(&self, node: &str) {
        let mut nodes = self.nodes.lock();
        nodes.entry(node.to_string()).or_insert_with(NodeLife::new).status = NodeStatus::Up;
    }

    pub fn subscribe(&self, node: &str) -> EpochRx {
        let mut nodes = self.nodes.lock();
        nodes.entry(node.to_string()).or_insert_with(NodeLife::new).fail_epoch.subscribe()
    }

    pub fn enter(&self, node: &str) -> InflightGuard {
        let mut nodes = self.nodes.lock();
        nodes.entry(node.to_string()).or_insert_with(NodeLife::new).inflight += 1;
        InflightGuard {
            live: self.clone(),
            node: node.to_string(),
        }
    }

    pub fn known_nodes(&self) -> Vec<String> {
        self.nodes.lock().keys().cloned().collect()
    }

    pub fn alive_nodes(&self) -> Vec<String> {
        self.nodes
            .lock()
            .iter()
            .filter(|(_, l)| l.status == NodeStatus::Up)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

pub struct InflightGuard {
    live: Liveness,
    node: String,
}

impl Drop for InflightGuard {
    fn drop(&mut self) {
        let mut nodes = self.live.nodes.lock();
        if let Some(life) = nodes.get_mut(&self.node) {
            life.inflight = life.inflight.saturating_sub(1);
            if life.inflight == 0 && life.status == NodeStatus::Leaving {
                life.status = NodeStatus::Down;
            }
        }
    }
}

/// Resolves once the node's fail epoch moves past the value seen at subscribe time.
pub async fn failed(rx: &mut EpochRx) {
    rx.changed().await;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leave_drains_before_down() {
        let l = Liveness::default();
        let g = l.enter("n");
        l.leave("n");
        assert_eq!(l.status("n"), NodeStatus::Leaving);
        drop(g);
        assert_eq!(l.status("n"), NodeStatus::Down);
        l.join("n");
        assert!(l.is_up("n"));
    }

    #[test]
    fn idle_leave_is_immediate() {
        let l = Liveness::default();
        l.leave("n");
        assert_eq!(l.status("n"), NodeStatus::Down);
    }

    #[tokio::test]
    async fn fail_wakes_subscribers() {
        let l = Liveness::default();
        let mut rx = l.subscribe("n");
        l.fail("n");
        failed(&mut rx).await;
        assert_eq!(l.alive_nodes(), Vec::<String>::new());
    }
}
