use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geo::{GeoPoint, Located};
use crate::netharness::Endpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NetType {
    Wifi,
    Ethernet,
    Cellular,
    Other,
}

impl NetType {
    fn family(self) -> Option<u8> {
        match self {
            NetType::Ethernet => Some(0),
            NetType::Wifi | NetType::Cellular => Some(1),
            NetType::Other => None,
        }
    }
}

/// 1.0 for the same network type, 0.5 for the same wired/wireless family,
/// 0 otherwise.
pub fn net_affinity(node: NetType, wanted: NetType) -> f64 {
    if node == wanted {
        1.0
    } else if node.family().is_some() && node.family() == wanted.family() {
        0.5
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeState {
    Alive,
    Suspect,
    Dead,
}

fn alive() -> NodeState {
    NodeState::Alive
}

/// A compute node as known to the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: String,
    pub location: GeoPoint,
    pub net_type: NetType,
    #[serde(default)]
    pub dedicated: bool,
    pub cpu_capacity: f64,
    pub mem_capacity: f64,
    #[serde(default)]
    pub cpu_used: f64,
    #[serde(default)]
    pub mem_used: f64,
    #[serde(default)]
    pub image_layers: BTreeSet<String>,
    #[serde(default)]
    pub last_heartbeat_ms: f64,
    #[serde(default = "alive")]
    pub state: NodeState,
    /// Control endpoint of the node's agent; defaults to the node id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Endpoint>,
}

impl NodeDescriptor {
    pub fn new(node_id: &str, location: GeoPoint, net_type: NetType, cpu: f64, mem: f64) -> Self {
        NodeDescriptor {
            node_id: node_id.to_string(),
            location,
            net_type,
            dedicated: false,
            cpu_capacity: cpu,
            mem_capacity: mem,
            cpu_used: 0.0,
            mem_used: 0.0,
            image_layers: BTreeSet::new(),
            last_heartbeat_ms: 0.0,
            state: NodeState::Alive,
            endpoint: None,
        }
    }

    pub fn dedicated(mut self, dedicated: bool) -> Self {
        self.dedicated = dedicated;
        self
    }

    pub fn with_layers<I: IntoIterator<Item = S>, S: Into<String>>(mut self, layers: I) -> Self {
        self.image_layers = layers.into_iter().map(Into::into).collect();
        self
    }

    pub fn free_cpu(&self) -> f64 {
        (self.cpu_capacity - self.cpu_used).max(0.0)
    }

    pub fn free_mem(&self) -> f64 {
        (self.mem_capacity - self.mem_used).max(0.0)
    }

    pub fn control_endpoint(&self) -> Endpoint {
        self.endpoint.clone().unwrap_or_else(|| Endpoint::node(&self.node_id))
    }
}

impl Located for NodeDescriptor {
    fn location(&self) -> GeoPoint {
        self.location
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub digest: String,
    #[serde(default)]
    pub pull_ms: u64,
}

/// Image reference: ordered layers plus the container start delay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub name: String,
    #[serde(default)]
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub start_ms: u64,
}

impl ImageRef {
    pub fn digests(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.digest.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeReq {
    pub cpu: f64,
    pub mem: f64,
}

/// Which handler a task runs and its per-frame cost on a speed-1.0 node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub handler: String,
    #[serde(default)]
    pub processing_ms: f64,
}

impl WorkloadSpec {
    pub fn compute_echo(processing_ms: f64) -> Self {
        WorkloadSpec {
            handler: "compute-echo".into(),
            processing_ms,
        }
    }

    pub fn vector_match(processing_ms: f64) -> Self {
        WorkloadSpec {
            handler: "vector-match".into(),
            processing_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub service_id: String,
    pub image: ImageRef,
    pub compute_req: ComputeReq,
    pub target_location: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_policy: Option<String>,
    /// Preferred network type for the affinity term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_type: Option<NetType>,
    pub workload: WorkloadSpec,
    /// Nodes to avoid when an alternative survives the filters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anti_affinity: Vec<String>,
    /// The service has registered storage; the captain discovers a Cargo.
    #[serde(default)]
    pub need_storage: bool,
}

impl TaskRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.service_id.is_empty() {
            return Err("service_id must not be empty".into());
        }
        if !(self.compute_req.cpu > 0.0 && self.compute_req.mem > 0.0) {
            return Err("compute_req must be strictly positive".into());
        }
        if !(self.workload.processing_ms >= 0.0) {
            return Err("processing_ms must be >= 0".into());
        }
        Ok(())
    }
}

/// Relative importance of each sorting policy; normalized before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    pub w_resource: f64,
    pub w_affinity: f64,
    pub w_layers: f64,
    pub w_distance: f64,
}

impl Default for PolicyWeights {
    fn default() -> Self {
        PolicyWeights {
            w_resource: 0.4,
            w_affinity: 0.2,
            w_layers: 0.2,
            w_distance: 0.2,
        }
    }
}

impl PolicyWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.w_resource, self.w_affinity, self.w_layers, self.w_distance];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err("weights must be >= 0".into());
        }
        if all.iter().sum::<f64>() <= 0.0 {
            return Err("weights must not all be zero".into());
        }
        Ok(())
    }

    pub fn normalized(&self) -> PolicyWeights {
        let sum = self.w_resource + self.w_affinity + self.w_layers + self.w_distance;
        PolicyWeights {
            w_resource: self.w_resource / sum,
            w_affinity: self.w_affinity / sum,
            w_layers: self.w_layers / sum,
            w_distance: self.w_distance / sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Pending,
    Pulling,
    Starting,
    Running,
    Failed,
    Cancelled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Failed | TaskState::Cancelled)
    }

    /// Forward moves along the lifecycle; terminal states are sinks.
    pub fn can_move_to(self, next: TaskState) -> bool {
        use TaskState::*;
        match (self, next) {
            (a, b) if a.is_terminal() => a == b,
            (_, Failed) | (_, Cancelled) => true,
            (a, b) => b >= a,
        }
    }
}

/// One service replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub service_id: String,
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Endpoint>,
    pub state: TaskState,
    #[serde(default)]
    pub load: u32,
    pub cpu_used: f64,
    pub mem_used: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at_ms: Option<f64>,
    /// Time from deploy receipt to RUNNING.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub startup_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl TaskRecord {
    pub fn new(task_id: &str, service_id: &str, node_id: &str, req: ComputeReq) -> Self {
        TaskRecord {
            task_id: task_id.to_string(),
            service_id: service_id.to_string(),
            node_id: node_id.to_string(),
            endpoint: None,
            state: TaskState::Pending,
            load: 0,
            cpu_used: req.cpu,
            mem_used: req.mem,
            started_at_ms: None,
            startup_ms: None,
            detail: String::new(),
        }
    }
}
