//! Control plane: the Beacon entry point and the Application Manager
//! (service lifecycle, candidate lists, demand-driven scaling).

pub mod am;
pub mod beacon;
pub mod select;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use am::{AmConfig, AmState, AppManager, ScaleAction};
pub use beacon::Beacon;
pub use select::{Candidate, CandidateList, Hosted, Rank, SelectWeights, UserQuery};

use crate::geo::GeoPoint;
use crate::scheduler::{ComputeReq, ImageRef, NetType, TaskRecord, TaskRequest, WorkloadSpec};
use crate::storage::{ReplicaSet, StorageReq};

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

/// What a developer submits to deploy a service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub service_id: String,
    pub image: ImageRef,
    pub compute_req: ComputeReq,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sched_policy: Option<String>,
    /// Expected user distribution.
    pub locations: Vec<GeoPoint>,
    #[serde(default)]
    pub need_storage: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_req: Option<StorageReq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_type: Option<NetType>,
    pub workload: WorkloadSpec,
    #[serde(default = "three")]
    pub initial_replicas: usize,
    #[serde(default = "three")]
    pub top_n: usize,
    #[serde(default = "yes")]
    pub autoscale: bool,
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.service_id.is_empty() {
            return Err("service_id must not be empty".into());
        }
        if self.locations.is_empty() {
            return Err("at least one expected user location is required".into());
        }
        if self.need_storage != self.storage_req.is_some() {
            return Err("storage_req must be given exactly when need_storage is set".into());
        }
        if let Some(s) = &self.storage_req {
            if !(s.capacity_mb > 0.0) {
                return Err("storage capacity must be positive".into());
            }
        }
        if self.initial_replicas == 0 || self.top_n == 0 {
            return Err("initial_replicas and top_n must be at least 1".into());
        }
        self.task_request(self.locations[0], Vec::new()).validate()
    }

    pub fn task_request(&self, target: GeoPoint, anti_affinity: Vec<String>) -> TaskRequest {
        TaskRequest {
            service_id: self.service_id.clone(),
            image: self.image.clone(),
            compute_req: self.compute_req,
            target_location: target,
            custom_policy: self.sched_policy.clone(),
            net_type: self.net_type,
            workload: self.workload.clone(),
            anti_affinity,
            need_storage: self.need_storage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServiceStatus {
    Pending,
    Active,
    ActiveDegraded,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEntry {
    pub loc: GeoPoint,
    pub last_seen_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    Initial,
    Floor,
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub at_ms: f64,
    pub kind: ScaleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<String>,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSummary {
    pub spec: ServiceSpec,
    pub status: ServiceStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
    pub tasks: Vec<TaskRecord>,
    pub users: BTreeMap<String, UserEntry>,
    pub scale_events: Vec<ScaleEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<ReplicaSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployReply {
    pub service_id: String,
    pub status: ServiceStatus,
    pub tasks: Vec<TaskRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<ReplicaSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum AmRequest {
    DeployService(ServiceSpec),
    ServiceSelect {
        service_id: String,
        query: UserQuery,
        #[serde(default)]
        rank: Rank,
    },
    /// The client's committed choice; feeds idle detection.
    ReportSelection {
        service_id: String,
        user_id: String,
        task_id: String,
    },
    ServiceStatus {
        service_id: String,
    },
    ListServices,
}
