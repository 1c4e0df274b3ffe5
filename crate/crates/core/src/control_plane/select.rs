//! Step-1 candidate generation: proximity search over the hosts of running
//! tasks, weighted scoring, top-N cut.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geo::{self, haversine_km, GeoPoint, Located};
use crate::netharness::Endpoint;
use crate::scheduler::policy::{distance_term, rank_order, ScoredNode};
use crate::scheduler::{net_affinity, NetType, NodeDescriptor, TaskRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectWeights {
    pub w_resource: f64,
    pub w_affinity: f64,
    pub w_distance: f64,
}

impl Default for SelectWeights {
    fn default() -> Self {
        SelectWeights {
            w_resource: 0.5,
            w_affinity: 0.2,
            w_distance: 0.3,
        }
    }
}

impl SelectWeights {
    pub fn normalized(&self) -> SelectWeights {
        let sum = self.w_resource + self.w_affinity + self.w_distance;
        if !(sum > 0.0) {
            return SelectWeights::default();
        }
        SelectWeights {
            w_resource: self.w_resource / sum,
            w_affinity: self.w_affinity / sum,
            w_distance: self.w_distance / sum,
        }
    }
}

/// Candidate ordering. `Distance` is the locality-only baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    #[default]
    Score,
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserQuery {
    pub user_id: String,
    pub loc: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_type: Option<NetType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub task_id: String,
    pub node_id: String,
    pub endpoint: Endpoint,
    pub score: f64,
    pub distance_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub service_id: String,
    pub entries: Vec<Candidate>,
    pub top_n: usize,
}

/// A running task together with the node that hosts it. `inflight` is the
/// host's in-flight request count across all its tasks.
#[derive(Debug, Clone)]
pub struct Hosted {
    pub task: TaskRecord,
    pub node: NodeDescriptor,
    pub inflight: u32,
}

impl Located for Hosted {
    fn location(&self) -> GeoPoint {
        self.node.location
    }
}

impl Hosted {
    /// Reserved cpu plus one core per in-flight request, against capacity.
    pub fn free_cpu(&self) -> f64 {
        (self.node.cpu_capacity - self.node.cpu_used - self.inflight as f64).max(0.0)
    }

    pub fn free_mem(&self) -> f64 {
        self.node.free_mem()
    }
}

/// Scores every host in the widened neighborhood of `q.loc` and returns the
/// best `top_n`, best first.
pub fn candidates(
    q: &UserQuery,
    hosts: &[Hosted],
    weights: &SelectWeights,
    start_precision: u8,
    top_n: usize,
    rank: Rank,
) -> Vec<Candidate> {
    let (local, _) = geo::widen_until(q.loc, hosts, top_n, start_precision);
    let w = weights.normalized();
    let max_cpu = local.iter().map(|h| h.free_cpu()).fold(0.0, f64::max);
    let max_mem = local.iter().map(|h| h.free_mem()).fold(0.0, f64::max);
    let ratio = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
    let mut scored: Vec<(ScoredNode, &Hosted)> = local
        .iter()
        .map(|h| {
            let km = haversine_km(q.loc, h.node.location);
            let resources = 0.5 * ratio(h.free_cpu(), max_cpu) + 0.5 * ratio(h.free_mem(), max_mem);
            let affinity = q.net_type.map_or(0.0, |t| net_affinity(h.node.net_type, t));
            let score = w.w_resource * resources + w.w_affinity * affinity + w.w_distance * distance_term(km);
            // tie-break on task id so two tasks on one host stay ordered
            let s = ScoredNode {
                node_id: h.task.task_id.clone(),
                score,
                distance_km: km,
            };
            (s, *h)
        })
        .collect();
    match rank {
        Rank::Score => scored.sort_by(|a, b| rank_order(&a.0, &b.0)),
        Rank::Distance => scored.sort_by(|a, b| {
            a.0.distance_km
                .partial_cmp(&b.0.distance_km)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.node_id.cmp(&b.0.node_id))
        }),
    }
    scored
        .into_iter()
        .take(top_n)
        .filter_map(|(s, h)| {
            Some(Candidate {
                task_id: h.task.task_id.clone(),
                node_id: h.node.node_id.clone(),
                endpoint: h.task.endpoint.clone()?,
                score: s.score,
                distance_km: s.distance_km,
            })
        })
        .collect()
}
