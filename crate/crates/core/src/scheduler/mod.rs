//! Spinner: compute-node registry, heartbeat liveness and task placement.

pub mod policy;
pub mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

pub use policy::{schedule, Comparator, CustomPolicy, Placement, Predicate, ScoredNode, SortTerm};
pub use types::*;

use crate::captain::CaptainRequest;
use crate::geo::DEFAULT_PRECISION;
use crate::netharness::{rpc, Clock, Endpoint, Handler, SharedTransport};
use crate::proto::{decode_request, Reply};

/// Reply code telling a captain to send `CaptainJoin` again.
pub const REREGISTER: u16 = 410;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SchedError {
    #[error("no alive nodes")]
    NoNodes,
    #[error("no capacity in region")]
    NoCapacity,
    #[error("validation: {0}")]
    Validation(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is already registered and alive")]
    Duplicate(String),
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("policy {0} already registered")]
    PolicyExists(String),
}

impl SchedError {
    pub fn reply(&self) -> Reply {
        match self {
            SchedError::UnknownNode(_) => Reply::error_code(REREGISTER, self.to_string()),
            SchedError::Validation(_) => Reply::error_code(400, self.to_string()),
            SchedError::UnknownTask(_) | SchedError::UnknownPolicy(_) => Reply::error_code(404, self.to_string()),
            SchedError::Duplicate(_) | SchedError::PolicyExists(_) => Reply::error_code(409, self.to_string()),
            SchedError::NoNodes | SchedError::NoCapacity => Reply::error_code(503, self.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpinnerConfig {
    pub weights: PolicyWeights,
    pub start_precision: u8,
    pub min_count: usize,
    pub heartbeat_ms: f64,
    pub suspect_ms: f64,
    pub dead_ms: f64,
    /// Placement attempts per deploy when captains refuse.
    pub deploy_attempts: usize,
}

impl Default for SpinnerConfig {
    fn default() -> Self {
        SpinnerConfig {
            weights: PolicyWeights::default(),
            start_precision: DEFAULT_PRECISION,
            min_count: 3,
            heartbeat_ms: 2000.0,
            suspect_ms: 6000.0,
            dead_ms: 10000.0,
            deploy_attempts: 3,
        }
    }
}

/// Heartbeat body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptainUpdate {
    pub node_id: String,
    pub cpu_used: f64,
    pub mem_used: f64,
    #[serde(default)]
    pub tasks: Vec<TaskRecord>,
    #[serde(default)]
    pub image_layers: BTreeSet<String>,
    /// Bumped by the captain on every restart; a change means unreported
    /// tasks were lost.
    #[serde(default)]
    pub incarnation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum SpinnerRequest {
    TaskDeploy(TaskRequest),
    TaskStatus { task_id: String },
    TaskCancel { task_id: String },
    CaptainJoin(NodeDescriptor),
    CaptainUpdate(CaptainUpdate),
    NewPolicy(CustomPolicy),
    ListNodes,
    ListTasks {
        #[serde(default)]
        service_id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployAck {
    pub task: TaskRecord,
    pub score: f64,
    pub prefetch: Vec<String>,
}

#[derive(Debug, Clone)]
struct NodeEntry {
    desc: NodeDescriptor,
    /// Task ids in the node's latest heartbeat.
    reported: BTreeSet<String>,
    incarnation: u64,
}

/// Registry and task table. Pure: time is passed in.
#[derive(Debug, Default)]
pub struct SpinnerState {
    config: SpinnerConfig,
    nodes: BTreeMap<String, NodeEntry>,
    tasks: BTreeMap<String, TaskRecord>,
    policies: BTreeMap<String, CustomPolicy>,
    next_task: u64,
}

impl SpinnerState {
    pub fn new(config: SpinnerConfig) -> Self {
        SpinnerState {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &SpinnerConfig {
        &self.config
    }

    pub fn join(&mut self, mut desc: NodeDescriptor, now_ms: f64) -> Result<(), SchedError> {
        if !(desc.cpu_capacity > 0.0 && desc.mem_capacity > 0.0) || desc.node_id.is_empty() {
            return Err(SchedError::Validation("node needs an id and positive capacity".into()));
        }
        if let Some(e) = self.nodes.get(&desc.node_id) {
            if e.desc.state != NodeState::Dead {
                return Err(SchedError::Duplicate(desc.node_id));
            }
        }
        desc.state = NodeState::Alive;
        desc.last_heartbeat_ms = now_ms;
        desc.cpu_used = desc.cpu_used.clamp(0.0, desc.cpu_capacity);
        desc.mem_used = desc.mem_used.clamp(0.0, desc.mem_capacity);
        info!(node = %desc.node_id, "captain joined");
        self.nodes.insert(
            desc.node_id.clone(),
            NodeEntry {
                desc,
                reported: BTreeSet::new(),
                incarnation: 0,
            },
        );
        Ok(())
    }

    pub fn update(&mut self, upd: CaptainUpdate, now_ms: f64) -> Result<(), SchedError> {
        let entry = match self.nodes.get_mut(&upd.node_id) {
            Some(e) if e.desc.state != NodeState::Dead => e,
            _ => return Err(SchedError::UnknownNode(upd.node_id)),
        };
        let restarted = upd.incarnation != entry.incarnation;
        let d = &mut entry.desc;
        d.last_heartbeat_ms = now_ms;
        d.state = NodeState::Alive;
        d.cpu_used = upd.cpu_used.clamp(0.0, d.cpu_capacity);
        d.mem_used = upd.mem_used.clamp(0.0, d.mem_capacity);
        d.image_layers = upd.image_layers;
        let now_reported: BTreeSet<String> = upd.tasks.iter().map(|t| t.task_id.clone()).collect();
        let previously = std::mem::replace(&mut entry.reported, now_reported.clone());
        entry.incarnation = upd.incarnation;
        for t in upd.tasks {
            if let Some(rec) = self.tasks.get_mut(&t.task_id) {
                if rec.node_id != upd.node_id || !rec.state.can_move_to(t.state) {
                    continue;
                }
                rec.state = t.state;
                rec.endpoint = t.endpoint;
                rec.load = t.load;
                rec.started_at_ms = t.started_at_ms;
                rec.startup_ms = t.startup_ms;
                if !t.detail.is_empty() {
                    rec.detail = t.detail;
                }
            }
        }
        // tasks the node used to report, or all unreported ones after a restart
        for rec in self.tasks.values_mut() {
            if rec.node_id != upd.node_id || rec.state.is_terminal() || now_reported.contains(&rec.task_id) {
                continue;
            }
            if restarted || previously.contains(&rec.task_id) {
                rec.state = TaskState::Failed;
                rec.detail = "lost by node".into();
            }
        }
        Ok(())
    }

    /// Applies heartbeat timeouts. Returns the state transitions made.
    pub fn tick(&mut self, now_ms: f64) -> Vec<(String, NodeState)> {
        let mut changed = Vec::new();
        for (id, e) in self.nodes.iter_mut() {
            let age = now_ms - e.desc.last_heartbeat_ms;
            let next = match e.desc.state {
                NodeState::Dead => continue,
                _ if age >= self.config.dead_ms => NodeState::Dead,
                NodeState::Alive if age >= self.config.suspect_ms => NodeState::Suspect,
                s => s,
            };
            if next != e.desc.state {
                e.desc.state = next;
                changed.push((id.clone(), next));
            }
        }
        for (id, state) in &changed {
            if *state == NodeState::Dead {
                warn!(node = %id, "captain declared dead");
                for rec in self.tasks.values_mut() {
                    if &rec.node_id == id && !rec.state.is_terminal() {
                        rec.state = TaskState::Failed;
                        rec.detail = "node dead".into();
                    }
                }
            }
        }
        changed
    }

    pub fn node(&self, id: &str) -> Option<&NodeDescriptor> {
        self.nodes.get(id).map(|e| &e.desc)
    }

    pub fn nodes(&self) -> Vec<NodeDescriptor> {
        self.nodes.values().map(|e| e.desc.clone()).collect()
    }

    /// Registry view with reservations for placed-but-unreported tasks
    /// folded into `cpu_used`/`mem_used`.
    pub fn snapshot(&self) -> Vec<NodeDescriptor> {
        self.nodes
            .values()
            .map(|e| {
                let mut d = e.desc.clone();
                for rec in self.tasks.values() {
                    if rec.node_id == d.node_id && !rec.state.is_terminal() && !e.reported.contains(&rec.task_id) {
                        d.cpu_used += rec.cpu_used;
                        d.mem_used += rec.mem_used;
                    }
                }
                d
            })
            .collect()
    }

    /// Schedules and commits a PENDING record that reserves resources.
    pub fn place(&mut self, req: &TaskRequest, exclude: &BTreeSet<String>) -> Result<(TaskRecord, Placement), SchedError> {
        req.validate().map_err(SchedError::Validation)?;
        let policy = match &req.custom_policy {
            Some(name) => Some(self.policies.get(name).ok_or_else(|| SchedError::UnknownPolicy(name.clone()))?),
            None => None,
        };
        let mut nodes = self.snapshot();
        for n in nodes.iter_mut() {
            if exclude.contains(&n.node_id) {
                n.state = NodeState::Dead;
            }
        }
        let c = &self.config;
        let placement = schedule(req, &nodes, &c.weights, policy, c.start_precision, c.min_count)?;
        self.next_task += 1;
        let task_id = format!("{}-t{}", req.service_id, self.next_task);
        let rec = TaskRecord::new(&task_id, &req.service_id, &placement.node_id, req.compute_req);
        debug!(task = %task_id, node = %placement.node_id, score = placement.score, "placed");
        self.tasks.insert(task_id, rec.clone());
        Ok((rec, placement))
    }

    pub fn mark_failed(&mut self, task_id: &str, reason: &str) {
        if let Some(rec) = self.tasks.get_mut(task_id) {
            if !rec.state.is_terminal() {
                rec.state = TaskState::Failed;
                rec.detail = reason.to_string();
            }
        }
    }

    pub fn mark_cancelled(&mut self, task_id: &str) {
        if let Some(rec) = self.tasks.get_mut(task_id) {
            if !rec.state.is_terminal() {
                rec.state = TaskState::Cancelled;
                rec.endpoint = None;
            }
        }
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskRecord, SchedError> {
        self.tasks.get(task_id).ok_or_else(|| SchedError::UnknownTask(task_id.to_string()))
    }

    pub fn tasks(&self, service_id: Option<&str>) -> Vec<TaskRecord> {
        self.tasks
            .values()
            .filter(|t| service_id.map_or(true, |s| t.service_id == s))
            .cloned()
            .collect()
    }

    pub fn register_policy(&mut self, policy: CustomPolicy) -> Result<(), SchedError> {
        policy.validate()?;
        if self.policies.contains_key(&policy.name) {
            return Err(SchedError::PolicyExists(policy.name));
        }
        self.policies.insert(policy.name.clone(), policy);
        Ok(())
    }
}

/// The Spinner service bound on the transport.
pub struct Spinner {
    id: String,
    net: SharedTransport,
    clock: Clock,
    state: Mutex<SpinnerState>,
}

impl Spinner {
    pub fn new(id: &str, net: SharedTransport, clock: Clock, config: SpinnerConfig) -> Arc<Self> {
        Arc::new(Spinner {
            id: id.to_string(),
            net,
            clock,
            state: Mutex::new(SpinnerState::new(config)),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_state<R>(&self, f: impl FnOnce(&mut SpinnerState) -> R) -> R {
        f(&mut self.state.lock())
    }

    /// Runs liveness checks every second until the runtime stops.
    pub fn spawn_monitor(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            let mut iv = tokio::time::interval(Duration::from_millis(1000));
            iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                iv.tick().await;
                let now = me.clock.now_ms();
                me.state.lock().tick(now);
            }
        })
    }

    async fn deploy(&self, req: TaskRequest) -> Result<DeployAck, Reply> {
        let attempts = self.state.lock().config.deploy_attempts.max(1);
        let mut exclude = BTreeSet::new();
        let mut last = String::new();
        for _ in 0..attempts {
            let (rec, placement) = self.state.lock().place(&req, &exclude).map_err(|e| {
                if last.is_empty() {
                    e.reply()
                } else {
                    Reply::error_code(503, format!("{e}; last refusal: {last}"))
                }
            })?;
            let target = self.state.lock().node(&rec.node_id).map(|n| n.control_endpoint());
            let target = target.unwrap_or_else(|| Endpoint::node(&rec.node_id));
            let msg = CaptainRequest::TaskDeploy {
                task_id: rec.task_id.clone(),
                request: req.clone(),
            };
            match rpc::<_, Reply>(self.net.as_ref(), &self.id, &target, &msg, None).await {
                Ok(r) if r.is_ok() => {
                    self.send_prefetch(&req, &placement.prefetch);
                    return Ok(DeployAck {
                        task: rec,
                        score: placement.score,
                        prefetch: placement.prefetch,
                    });
                }
                Ok(r) => last = r.detail,
                Err(e) => last = e.to_string(),
            }
            warn!(task = %rec.task_id, node = %rec.node_id, reason = %last, "deploy refused");
            self.state.lock().mark_failed(&rec.task_id, &last);
            exclude.insert(rec.node_id);
        }
        Err(Reply::error_code(503, format!("deploy failed: {last}")))
    }

    fn send_prefetch(&self, req: &TaskRequest, nodes: &[String]) {
        for id in nodes {
            let target = self.state.lock().node(id).map(|n| n.control_endpoint());
            let Some(target) = target else { continue };
            let net = self.net.clone();
            let me = self.id.clone();
            let msg = CaptainRequest::Prefetch { image: req.image.clone() };
            tokio::spawn(async move {
                if let Err(e) = rpc::<_, Reply>(net.as_ref(), &me, &target, &msg, None).await {
                    debug!(node = %target.node_id, error = %e, "prefetch not delivered");
                }
            });
        }
    }

    async fn cancel(&self, task_id: String) -> Result<TaskRecord, Reply> {
        let (rec, target) = {
            let st = self.state.lock();
            let rec = st.task(&task_id).map_err(|e| e.reply())?.clone();
            let target = st
                .node(&rec.node_id)
                .filter(|n| n.state != NodeState::Dead)
                .map(|n| n.control_endpoint());
            (rec, target)
        };
        if rec.state.is_terminal() {
            return Ok(rec);
        }
        if let Some(target) = target {
            let msg = CaptainRequest::TaskCancel { task_id: task_id.clone() };
            if let Err(e) = rpc::<_, Reply>(self.net.as_ref(), &self.id, &target, &msg, None).await {
                // owner unreachable: it will be declared dead and the task is gone with it
                debug!(task = %task_id, error = %e, "cancel not acknowledged");
            }
        }
        let mut st = self.state.lock();
        st.mark_cancelled(&task_id);
        Ok(st.task(&task_id).map_err(|e| e.reply())?.clone())
    }

    async fn dispatch(&self, req: SpinnerRequest) -> Result<Reply, Reply> {
        let now = self.clock.now_ms();
        match req {
            SpinnerRequest::TaskDeploy(r) => Ok(Reply::ok(self.deploy(r).await?)),
            SpinnerRequest::TaskStatus { task_id } => {
                let st = self.state.lock();
                Ok(Reply::ok(st.task(&task_id).map_err(|e| e.reply())?))
            }
            SpinnerRequest::TaskCancel { task_id } => Ok(Reply::ok(self.cancel(task_id).await?)),
            SpinnerRequest::CaptainJoin(desc) => {
                let id = desc.node_id.clone();
                self.state.lock().join(desc, now).map_err(|e| e.reply())?;
                Ok(Reply::ok_detail(serde_json::Value::Null, format!("{id} registered")))
            }
            SpinnerRequest::CaptainUpdate(upd) => {
                self.state.lock().update(upd, now).map_err(|e| e.reply())?;
                Ok(Reply::ok(serde_json::Value::Null))
            }
            SpinnerRequest::NewPolicy(p) => {
                let name = p.name.clone();
                self.state.lock().register_policy(p).map_err(|e| e.reply())?;
                Ok(Reply::ok_detail(serde_json::Value::Null, format!("policy {name} registered")))
            }
            SpinnerRequest::ListNodes => Ok(Reply::ok(self.state.lock().nodes())),
            SpinnerRequest::ListTasks { service_id } => Ok(Reply::ok(self.state.lock().tasks(service_id.as_deref()))),
        }
    }
}

#[async_trait]
impl Handler for Spinner {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let reply = match decode_request::<SpinnerRequest>(&request) {
            Ok(req) => self.dispatch(req).await.into(),
            Err(r) => r,
        };
        reply.to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn node(id: &str) -> NodeDescriptor {
        NodeDescriptor::new(id, GeoPoint::new(44.97, -93.26).unwrap(), NetType::Wifi, 4.0, 4096.0)
    }

    fn req() -> TaskRequest {
        TaskRequest {
            service_id: "svc".into(),
            image: ImageRef {
                name: "img".into(),
                layers: vec![],
                start_ms: 0,
            },
            compute_req: ComputeReq { cpu: 1.0, mem: 512.0 },
            target_location: GeoPoint::new(44.97, -93.26).unwrap(),
            custom_policy: None,
            net_type: None,
            workload: WorkloadSpec::compute_echo(10.0),
            anti_affinity: vec![],
            need_storage: false,
        }
    }

    fn heartbeat(id: &str, tasks: Vec<TaskRecord>) -> CaptainUpdate {
        CaptainUpdate {
            node_id: id.into(),
            cpu_used: tasks.iter().map(|t| t.cpu_used).sum(),
            mem_used: tasks.iter().map(|t| t.mem_used).sum(),
            tasks,
            image_layers: BTreeSet::new(),
            incarnation: 0,
        }
    }

    #[test]
    fn join_rules() {
        let mut st = SpinnerState::new(SpinnerConfig::default());
        st.join(node("a"), 0.0).unwrap();
        assert_eq!(st.join(node("a"), 1.0), Err(SchedError::Duplicate("a".into())));
        st.tick(10_000.0);
        assert_eq!(st.node("a").unwrap().state, NodeState::Dead);
        st.join(node("a"), 11_000.0).unwrap();
        assert_eq!(st.node("a").unwrap().state, NodeState::Alive);
    }

    #[test]
    fn unknown_heartbeat_asks_to_reregister() {
        let mut st = SpinnerState::new(SpinnerConfig::default());
        let err = st.update(heartbeat("ghost", vec![]), 0.0).unwrap_err();
        assert_eq!(err.reply().code, Some(REREGISTER));
    }

    #[test]
    fn reservation_blocks_double_booking() {
        let mut small = node("a");
        small.cpu_capacity = 1.5;
        let mut st2 = SpinnerState::new(SpinnerConfig::default());
        st2.join(small, 0.0).unwrap();
        st2.place(&req(), &BTreeSet::new()).unwrap();
        assert_eq!(st2.place(&req(), &BTreeSet::new()).unwrap_err(), SchedError::NoCapacity);
        // once reported, the heartbeat figure replaces the reservation
        let rec = st2.tasks(None)[0].clone();
        st2.update(heartbeat("a", vec![rec]), 100.0).unwrap();
        assert_eq!(st2.snapshot()[0].cpu_used, 1.0);
    }

    #[test]
    fn dead_node_fails_tasks_and_lost_tasks_fail() {
        let mut st = SpinnerState::new(SpinnerConfig::default());
        st.join(node("a"), 0.0).unwrap();
        let (rec, _) = st.place(&req(), &BTreeSet::new()).unwrap();
        let (rec2, _) = st.place(&req(), &BTreeSet::new()).unwrap();
        let mut running = rec.clone();
        running.state = TaskState::Running;
        st.update(heartbeat("a", vec![running, rec2.clone()]), 1.0).unwrap();
        assert_eq!(st.task(&rec.task_id).unwrap().state, TaskState::Running);
        st.update(heartbeat("a", vec![rec2.clone()]), 2.0).unwrap();
        assert_eq!(st.task(&rec.task_id).unwrap().state, TaskState::Failed);
        st.tick(10_002.0);
        assert_eq!(st.task(&rec2.task_id).unwrap().state, TaskState::Failed);
    }

    #[test]
    fn policy_registration() {
        let mut st = SpinnerState::new(SpinnerConfig::default());
        let p = CustomPolicy {
            name: "ded".into(),
            filters: vec![Predicate::new("dedicated", Comparator::Eq, true.into())],
            sort: vec![],
        };
        st.register_policy(p.clone()).unwrap();
        assert!(matches!(st.register_policy(p), Err(SchedError::PolicyExists(_))));
        let bad = CustomPolicy {
            name: "bad".into(),
            filters: vec![Predicate::new("colour", Comparator::Eq, "red".into())],
            sort: vec![],
        };
        assert!(matches!(st.register_policy(bad), Err(SchedError::Validation(_))));
    }

    #[test]
    fn request_wire_shape() {
        let r: SpinnerRequest = serde_json::from_str(r#"{"type":"TaskStatus","body":{"task_id":"x"}}"#).unwrap();
        assert_eq!(r, SpinnerRequest::TaskStatus { task_id: "x".into() });
        let r: SpinnerRequest = serde_json::from_str(r#"{"type":"ListNodes"}"#).unwrap();
        assert_eq!(r, SpinnerRequest::ListNodes);
    }
}
