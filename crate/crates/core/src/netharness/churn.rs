use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use super::{Liveness, NetError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChurnAction {
    Join,
    Fail,
    Leave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub at_ms: u64,
    pub action: ChurnAction,
    pub node_id: String,
}

/// Ordered list of membership events on the virtual (or real) timeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChurnScript {
    pub events: Vec<ChurnEvent>,
}

/// Alive set recorded right after an event was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ChurnLogEntry {
    pub at_ms: u64,
    pub event: ChurnEvent,
    pub alive: Vec<String>,
}

impl ChurnScript {
    pub fn from_json(text: &str) -> Result<Self, NetError> {
        serde_json::from_str(text).map_err(|e| NetError::Config(format!("churn script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path).map_err(|e| NetError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks ordering, node names and that every FAIL/LEAVE hits a node
    /// that is alive at that point (and every JOIN one that is not).
    pub fn validate(&self, known: &BTreeSet<String>, initially_alive: &BTreeSet<String>) -> Result<(), NetError> {
        let mut alive = initially_alive.clone();
        let mut last = 0;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.at_ms < last {
                return Err(NetError::Config(format!("event {i} at {} ms is out of order", ev.at_ms)));
            }
            last = ev.at_ms;
            if !known.contains(&ev.node_id) {
                return Err(NetError::Config(format!("event {i}: unknown node {}", ev.node_id)));
            }
            match ev.action {
                ChurnAction::Join => {
                    if !alive.insert(ev.node_id.clone()) {
                        return Err(NetError::Config(format!("event {i}: {} is already alive", ev.node_id)));
                    }
                }
                ChurnAction::Fail | ChurnAction::Leave => {
                    if !alive.remove(&ev.node_id) {
                        return Err(NetError::Config(format!("event {i}: {} is not alive", ev.node_id)));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn apply_event(live: &Liveness, ev: &ChurnEvent) {
    match ev.action {
        ChurnAction::Join => live.join(&ev.node_id),
        ChurnAction::Fail => live.fail(&ev.node_id),
        ChurnAction::Leave => live.leave(&ev.node_id),
    }
}

/// Replays `script` against `live`, with event times relative to `origin`.
/// `on_event` runs after each transition is applied.
pub async fn apply_churn<F>(script: &ChurnScript, live: &Liveness, origin: Instant, mut on_event: F) -> Vec<ChurnLogEntry>
where
    F: FnMut(&ChurnEvent),
{
    let mut log = Vec::with_capacity(script.events.len());
    for ev in &script.events {
        tokio::time::sleep_until(origin + Duration::from_millis(ev.at_ms)).await;
        apply_event(live, ev);
        on_event(ev);
        log.push(ChurnLogEntry {
            at_ms: ev.at_ms,
            event: ev.clone(),
            alive: live.alive_nodes(),
        });
    }
    log
}
