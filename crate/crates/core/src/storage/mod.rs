//! Edge storage: the Cargo Manager (replica placement, discovery, storage
//! auto-scaling) and Cargo nodes holding chain-replicated key-value data.

pub mod cargo;
pub mod manager;
pub mod sdk;
pub mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cargo::{Cargo, CargoConfig};
pub use manager::{CargoManager, ManagerConfig, ManagerState};
pub use sdk::CargoClient;
pub use store::{Record, Store, Version};

use crate::geo::{GeoPoint, Located};
use crate::netharness::Endpoint;
use crate::proto::Reply;
use crate::scheduler::NodeState;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StorageError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io: {0}")]
    Io(String),
    #[error("service {0} not hosted here")]
    NotHosted(String),
    #[error("insufficient storage capacity")]
    NoCapacity,
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown cargo {0}")]
    UnknownCargo(String),
    #[error("cargo {0} is already registered and alive")]
    Duplicate(String),
    #[error("no live replicas")]
    NoReplicas,
    #[error("replication failed: {0}")]
    Replication(String),
}

impl StorageError {
    pub fn reply(&self) -> Reply {
        let code = match self {
            StorageError::Validation(_) | StorageError::Dataset(_) => 400,
            StorageError::NotHosted(_) | StorageError::UnknownService(_) => 404,
            StorageError::UnknownCargo(_) => crate::scheduler::REREGISTER,
            StorageError::Duplicate(_) => 409,
            StorageError::Replication(_) => 504,
            StorageError::Io(_) | StorageError::NoCapacity | StorageError::NoReplicas => 503,
        };
        Reply::error_code(code, self.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Consistency {
    Strong,
    Eventual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CargoDescriptor {
    pub node_id: String,
    pub location: GeoPoint,
    pub capacity_mb: f64,
    /// Data actually held, as reported by the node.
    #[serde(default)]
    pub used_mb: f64,
    /// Capacity promised to replica sets.
    #[serde(default)]
    pub reserved_mb: f64,
    #[serde(default = "alive")]
    pub state: NodeState,
    #[serde(default)]
    pub last_heartbeat_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Endpoint>,
}

fn alive() -> NodeState {
    NodeState::Alive
}

impl CargoDescriptor {
    pub fn new(node_id: &str, location: GeoPoint, capacity_mb: f64) -> Self {
        CargoDescriptor {
            node_id: node_id.to_string(),
            location,
            capacity_mb,
            used_mb: 0.0,
            reserved_mb: 0.0,
            state: NodeState::Alive,
            last_heartbeat_ms: 0.0,
            endpoint: None,
        }
    }

    pub fn free_mb(&self) -> f64 {
        (self.capacity_mb - self.reserved_mb).max(0.0)
    }

    pub fn peer(&self) -> CargoPeer {
        CargoPeer {
            node_id: self.node_id.clone(),
            endpoint: self.endpoint.clone().unwrap_or_else(|| Endpoint::node(&self.node_id)),
        }
    }
}

impl Located for CargoDescriptor {
    fn location(&self) -> GeoPoint {
        self.location
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CargoPeer {
    pub node_id: String,
    pub endpoint: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReq {
    pub capacity_mb: f64,
    pub consistency: Consistency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_source: Option<String>,
}

/// Cargos holding one service's data; list order is the cascade chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSet {
    pub service_id: String,
    pub consistency: Consistency,
    pub replicas: Vec<CargoPeer>,
    pub capacity_mb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_source: Option<String>,
    #[serde(default)]
    pub degraded: bool,
}

impl ReplicaSet {
    pub fn ids(&self) -> Vec<String> {
        self.replicas.iter().map(|p| p.node_id.clone()).collect()
    }
}

/// Messages understood by a Cargo node. The first five mirror the storage SDK.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum CargoRequest {
    InitCargo {
        service_id: String,
    },
    Read {
        service_id: String,
        key: String,
    },
    Write {
        service_id: String,
        key: String,
        #[serde(with = "hex")]
        value: Vec<u8>,
    },
    CloseCargo {
        service_id: String,
    },
    VectorMatch {
        service_id: String,
        query: Vec<f64>,
        threshold: f64,
    },
    /// Start holding a replica, ingesting from the data source or cloning
    /// from a peer.
    Host {
        set: ReplicaSet,
        #[serde(default)]
        clone_from: Option<CargoPeer>,
    },
    Chain {
        service_id: String,
        chain: Vec<CargoPeer>,
    },
    /// Apply, then pass down the remaining chain.
    Replicate {
        service_id: String,
        record: Record,
        rest: Vec<CargoPeer>,
    },
    Snapshot {
        service_id: String,
    },
    Merge {
        service_id: String,
        records: Vec<Record>,
    },
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadReply {
    pub record: Option<Record>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteAck {
    pub version: Version,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReply {
    pub key: Option<String>,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaStatus {
    pub service_id: String,
    pub keys: usize,
    pub used_mb: f64,
    pub consistency: Consistency,
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CargoStatus {
    pub node_id: String,
    pub used_mb: f64,
    pub replicas: Vec<ReplicaStatus>,
}

/// Captain-side probe result fed back to the manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFeedback {
    pub captain_id: String,
    pub location: GeoPoint,
    pub service_id: String,
    pub best_cargo: String,
    pub best_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CargoCandidate {
    pub node_id: String,
    pub endpoint: Endpoint,
    pub distance_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum ManagerRequest {
    CargoJoin(CargoDescriptor),
    CargoUpdate {
        node_id: String,
        used_mb: f64,
    },
    StoreRegister {
        service_id: String,
        capacity_mb: f64,
        consistency: Consistency,
        #[serde(default)]
        data_source: Option<String>,
        locations: Vec<GeoPoint>,
    },
    CargoDiscover {
        node_id: String,
        location: GeoPoint,
        service_id: String,
    },
    ProbeFeedback(ProbeFeedback),
    ListCargos,
    ReplicaSet {
        service_id: String,
    },
}
