//! Filter-then-weighted-sort placement.
//!
//! Pipeline over ALIVE nodes:
//! 1. geo filter: cell-or-neighbor of the target at the precision where
//!    widening first finds `min_count` alive nodes;
//! 2. resource filter: free cpu and memory cover the request;
//! 3. custom filter predicates, when a registered policy is named.
//!
//! Each survivor is scored with normalized weights:
//!
//! ```text
//! score = w_resource * (0.5 * free_cpu / max_free_cpu + 0.5 * free_mem / max_free_mem)
//!       + w_affinity * net_affinity(node, requested)      (0 when nothing requested)
//!       + w_layers   * shared_layers / image_layers       (0 for an empty image)
//!       + w_distance * (1 - min(1, km / 100))
//!       + sum(custom sort weight for each matching sort predicate)
//! ```
//!
//! Maxima are taken over the survivor set. The highest score wins; scores
//! within 1e-9 tie and are broken by distance, then node id.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::types::{net_affinity, NodeDescriptor, NodeState, PolicyWeights, TaskRequest};
use super::SchedError;
use crate::geo::{self, haversine_km};

pub const SCORE_EPSILON: f64 = 1e-9;
pub const DISTANCE_SCALE_KM: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// `field <cmp> value` over a node descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub field: String,
    pub cmp: Comparator,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortTerm {
    #[serde(flatten)]
    pub predicate: Predicate,
    pub weight: f64,
}

/// A registered policy: extra filters plus weighted boost terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomPolicy {
    pub name: String,
    #[serde(default)]
    pub filters: Vec<Predicate>,
    #[serde(default)]
    pub sort: Vec<SortTerm>,
}

enum FieldKind {
    Text,
    Flag,
    Number,
}

fn field_kind(field: &str) -> Option<FieldKind> {
    Some(match field {
        "node_id" | "net_type" => FieldKind::Text,
        "dedicated" => FieldKind::Flag,
        "cpu_capacity" | "mem_capacity" | "cpu_used" | "mem_used" | "cpu_free" | "mem_free" | "lat" | "lon" => {
            FieldKind::Number
        }
        _ => return None,
    })
}

impl Predicate {
    pub fn new(field: &str, cmp: Comparator, value: Value) -> Self {
        Predicate {
            field: field.to_string(),
            cmp,
            value,
        }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let kind = field_kind(&self.field).ok_or_else(|| SchedError::Validation(format!("unknown field {:?}", self.field)))?;
        let ordered = matches!(self.cmp, Comparator::Lt | Comparator::Le | Comparator::Gt | Comparator::Ge);
        let ok = match kind {
            FieldKind::Text => self.value.is_string() && !ordered,
            FieldKind::Flag => self.value.is_boolean() && !ordered,
            FieldKind::Number => self.value.is_number(),
        };
        if ok {
            Ok(())
        } else {
            Err(SchedError::Validation(format!(
                "field {:?} cannot be compared with {:?} using {:?}",
                self.field, self.value, self.cmp
            )))
        }
    }

    pub fn matches(&self, n: &NodeDescriptor) -> bool {
        match self.field.as_str() {
            "node_id" => self.cmp_text(&n.node_id),
            "net_type" => {
                let t = serde_json::to_value(n.net_type).expect("enum serializes");
                self.cmp_text(t.as_str().unwrap_or_default())
            }
            "dedicated" => match (self.value.as_bool(), self.cmp) {
                (Some(v), Comparator::Eq) => n.dedicated == v,
                (Some(v), Comparator::Ne) => n.dedicated != v,
                _ => false,
            },
            "cpu_capacity" => self.cmp_num(n.cpu_capacity),
            "mem_capacity" => self.cmp_num(n.mem_capacity),
            "cpu_used" => self.cmp_num(n.cpu_used),
            "mem_used" => self.cmp_num(n.mem_used),
            "cpu_free" => self.cmp_num(n.free_cpu()),
            "mem_free" => self.cmp_num(n.free_mem()),
            "lat" => self.cmp_num(n.location.lat()),
            "lon" => self.cmp_num(n.location.lon()),
            _ => false,
        }
    }

    fn cmp_text(&self, actual: &str) -> bool {
        let Some(v) = self.value.as_str() else { return false };
        match self.cmp {
            Comparator::Eq => actual.eq_ignore_ascii_case(v),
            Comparator::Ne => !actual.eq_ignore_ascii_case(v),
            _ => false,
        }
    }

    fn cmp_num(&self, actual: f64) -> bool {
        let Some(v) = self.value.as_f64() else { return false };
        match self.cmp {
            Comparator::Eq => actual == v,
            Comparator::Ne => actual != v,
            Comparator::Lt => actual < v,
            Comparator::Le => actual <= v,
            Comparator::Gt => actual > v,
            Comparator::Ge => actual >= v,
        }
    }
}

impl CustomPolicy {
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.name.is_empty() {
            return Err(SchedError::Validation("policy name must not be empty".into()));
        }
        for p in &self.filters {
            p.validate()?;
        }
        for t in &self.sort {
            t.predicate.validate()?;
            if !t.weight.is_finite() {
                return Err(SchedError::Validation("sort weight must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredNode {
    pub node_id: String,
    pub score: f64,
    pub distance_km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub node_id: String,
    pub score: f64,
    pub precision: u8,
    /// Every survivor, best first.
    pub ranking: Vec<ScoredNode>,
    /// Unselected survivors that lack part of the image.
    pub prefetch: Vec<String>,
}

pub fn resource_fits(n: &NodeDescriptor, req: &TaskRequest) -> bool {
    n.free_cpu() >= req.compute_req.cpu && n.free_mem() >= req.compute_req.mem
}

pub fn layer_overlap(n: &NodeDescriptor, req: &TaskRequest) -> f64 {
    let total = req.image.layers.len();
    if total == 0 {
        return 0.0;
    }
    let shared = req.image.digests().filter(|d| n.image_layers.contains(*d)).count();
    shared as f64 / total as f64
}

pub fn distance_term(km: f64) -> f64 {
    1.0 - (km / DISTANCE_SCALE_KM).min(1.0)
}

/// Orders scored candidates best-first with the deterministic tie-break.
pub fn rank_order(a: &ScoredNode, b: &ScoredNode) -> Ordering {
    if (a.score - b.score).abs() > SCORE_EPSILON {
        return b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal);
    }
    a.distance_km
        .partial_cmp(&b.distance_km)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.node_id.cmp(&b.node_id))
}

/// Scores survivors. Normalization maxima come from `survivors` itself.
pub fn score_nodes(
    req: &TaskRequest,
    survivors: &[&NodeDescriptor],
    weights: &PolicyWeights,
    policy: Option<&CustomPolicy>,
) -> Vec<ScoredNode> {
    let w = weights.normalized();
    let max_cpu = survivors.iter().map(|n| n.free_cpu()).fold(0.0, f64::max);
    let max_mem = survivors.iter().map(|n| n.free_mem()).fold(0.0, f64::max);
    let ratio = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
    let mut out: Vec<ScoredNode> = survivors
        .iter()
        .map(|n| {
            let km = haversine_km(n.location, req.target_location);
            let resources = 0.5 * ratio(n.free_cpu(), max_cpu) + 0.5 * ratio(n.free_mem(), max_mem);
            let affinity = req.net_type.map(|t| net_affinity(n.net_type, t)).unwrap_or(0.0);
            let mut score = w.w_resource * resources
                + w.w_affinity * affinity
                + w.w_layers * layer_overlap(n, req)
                + w.w_distance * distance_term(km);
            if let Some(p) = policy {
                score += p.sort.iter().filter(|t| t.predicate.matches(n)).map(|t| t.weight).sum::<f64>();
            }
            ScoredNode {
                node_id: n.node_id.clone(),
                score,
                distance_km: km,
            }
        })
        .collect();
    out.sort_by(rank_order);
    out
}

/// Alive nodes passing the geo, resource and custom filters, in input order,
/// together with the geo precision used.
pub fn survivors<'a>(
    req: &TaskRequest,
    nodes: &'a [NodeDescriptor],
    policy: Option<&CustomPolicy>,
    start_precision: u8,
    min_count: usize,
) -> (Vec<&'a NodeDescriptor>, u8) {
    let alive: Vec<NodeDescriptor> = nodes.iter().filter(|n| n.state == NodeState::Alive).cloned().collect();
    let precision = geo::widened_precision(req.target_location, &alive, min_count, start_precision);
    let filters: Vec<Box<dyn Fn(&NodeDescriptor) -> bool + '_>> = vec![
        Box::new(|n: &NodeDescriptor| n.state == NodeState::Alive),
        Box::new(move |n: &NodeDescriptor| geo::in_neighborhood(req.target_location, n.location, precision)),
        Box::new(|n: &NodeDescriptor| resource_fits(n, req)),
        Box::new(move |n: &NodeDescriptor| policy.map_or(true, |p| p.filters.iter().all(|f| f.matches(n)))),
    ];
    let mut out: Vec<&NodeDescriptor> = nodes.iter().filter(|n| filters.iter().all(|f| f(n))).collect();
    if !req.anti_affinity.is_empty() {
        let spread: Vec<&NodeDescriptor> = out
            .iter()
            .copied()
            .filter(|n| !req.anti_affinity.contains(&n.node_id))
            .collect();
        if !spread.is_empty() {
            out = spread;
        }
    }
    (out, precision)
}

pub fn schedule(
    req: &TaskRequest,
    nodes: &[NodeDescriptor],
    weights: &PolicyWeights,
    policy: Option<&CustomPolicy>,
    start_precision: u8,
    min_count: usize,
) -> Result<Placement, SchedError> {
    if !nodes.iter().any(|n| n.state == NodeState::Alive) {
        return Err(SchedError::NoNodes);
    }
    let (survivors, precision) = survivors(req, nodes, policy, start_precision, min_count);
    let ranking = score_nodes(req, &survivors, weights, policy);
    let best = ranking.first().cloned().ok_or(SchedError::NoCapacity)?;
    let prefetch = survivors
        .iter()
        .filter(|n| n.node_id != best.node_id)
        .filter(|n| req.image.digests().any(|d| !n.image_layers.contains(d)))
        .map(|n| n.node_id.clone())
        .collect();
    Ok(Placement {
        node_id: best.node_id.clone(),
        score: best.score,
        precision,
        ranking,
        prefetch,
    })
}
