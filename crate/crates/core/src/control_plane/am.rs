use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, info, warn};

use super::select::{candidates, CandidateList, Hosted, Rank, SelectWeights, UserQuery};
use super::{
    AmRequest, DeployReply, ScaleEvent, ScaleKind, ServiceSpec, ServiceStatus, ServiceSummary, UserEntry,
};
use crate::geo::{encode, in_neighborhood, GeoPoint, DEFAULT_PRECISION};
use crate::netharness::{ms_duration, Clock, Endpoint, Handler, SharedTransport};
use crate::proto::{decode_request, request, CallError, Reply};
use crate::scheduler::{DeployAck, NodeDescriptor, NodeState, SpinnerRequest, TaskRecord, TaskState};
use crate::storage::{ManagerRequest, ReplicaSet};

#[derive(Debug, Clone)]
pub struct AmConfig {
    pub spinner: Endpoint,
    pub cargo_mgr: Endpoint,
    pub poll_ms: f64,
    pub user_ttl_ms: f64,
    pub idle_ttl_ms: f64,
    pub load_factor: f64,
    /// Geohash precision for demand cells and the first proximity search.
    pub precision: u8,
    pub weights: SelectWeights,
    pub backoff_base_ms: f64,
    pub backoff_max_ms: f64,
    pub deploy_timeout: Duration,
    pub storage_timeout: Duration,
}

impl AmConfig {
    pub fn new(spinner: Endpoint, cargo_mgr: Endpoint) -> Self {
        AmConfig {
            spinner,
            cargo_mgr,
            poll_ms: 1000.0,
            user_ttl_ms: 30_000.0,
            idle_ttl_ms: 60_000.0,
            load_factor: 0.8,
            precision: DEFAULT_PRECISION,
            weights: SelectWeights::default(),
            backoff_base_ms: 2000.0,
            backoff_max_ms: 30_000.0,
            deploy_timeout: Duration::from_secs(10),
            storage_timeout: Duration::from_secs(30),
        }
    }
}

/// One step decided by the planner and carried out against the Spinner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ScaleAction {
    Deploy {
        kind: ScaleKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cell: Option<String>,
        reason: String,
        target: GeoPoint,
        anti_affinity: Vec<String>,
    },
    Cancel {
        task_id: String,
        reason: String,
    },
}

const FLOOR_KEY: &str = "floor";

#[derive(Debug, Clone)]
struct Backoff {
    until_ms: f64,
    failures: u32,
}

#[derive(Debug, Clone)]
struct ServiceEntry {
    spec: ServiceSpec,
    rejected: Option<String>,
    warning: String,
    tasks: BTreeMap<String, TaskRecord>,
    users: BTreeMap<String, UserEntry>,
    events: Vec<ScaleEvent>,
    storage: Option<ReplicaSet>,
    next_loc: usize,
    backoff: BTreeMap<String, Backoff>,
    idle_since: BTreeMap<String, f64>,
}

impl ServiceEntry {
    fn new(spec: ServiceSpec) -> Self {
        ServiceEntry {
            spec,
            rejected: None,
            warning: String::new(),
            tasks: BTreeMap::new(),
            users: BTreeMap::new(),
            events: Vec::new(),
            storage: None,
            next_loc: 0,
            backoff: BTreeMap::new(),
            idle_since: BTreeMap::new(),
        }
    }

    fn live(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values().filter(|t| !t.state.is_terminal())
    }

    fn status(&self) -> ServiceStatus {
        if self.rejected.is_some() {
            return ServiceStatus::Rejected;
        }
        if !self.tasks.values().any(|t| t.state == TaskState::Running) {
            return ServiceStatus::Pending;
        }
        let degraded_storage = self.storage.as_ref().is_some_and(|s| s.degraded);
        if self.live().count() < self.spec.initial_replicas || degraded_storage {
            ServiceStatus::ActiveDegraded
        } else {
            ServiceStatus::Active
        }
    }

    fn backed_off(&self, key: &str, now: f64) -> bool {
        self.backoff.get(key).is_some_and(|b| now < b.until_ms)
    }

    fn next_location(&mut self) -> GeoPoint {
        let locs = &self.spec.locations;
        let p = locs[self.next_loc % locs.len()];
        self.next_loc += 1;
        p
    }

    fn summary(&self) -> ServiceSummary {
        let detail = self.rejected.clone().unwrap_or_else(|| self.warning.clone());
        ServiceSummary {
            spec: self.spec.clone(),
            status: self.status(),
            detail,
            tasks: self.tasks.values().cloned().collect(),
            users: self.users.clone(),
            scale_events: self.events.clone(),
            storage: self.storage.clone(),
        }
    }
}

fn centroid(points: &[GeoPoint]) -> GeoPoint {
    let n = points.len() as f64;
    let lat = points.iter().map(|p| p.lat()).sum::<f64>() / n;
    let lon = points.iter().map(|p| p.lon()).sum::<f64>() / n;
    GeoPoint::new(lat, lon).expect("mean of valid points is valid")
}

/// Concurrent requests one task on `node` can absorb.
fn budget(node: &NodeDescriptor, cpu_req: f64) -> f64 {
    (node.cpu_capacity / cpu_req).floor().max(1.0)
}

/// Service table plus the latest registry view. Pure: time is passed in.
#[derive(Debug)]
pub struct AmState {
    config: AmConfig,
    services: BTreeMap<String, ServiceEntry>,
    nodes: BTreeMap<String, NodeDescriptor>,
    all_tasks: Vec<TaskRecord>,
}

impl AmState {
    pub fn new(config: AmConfig) -> Self {
        AmState {
            config,
            services: BTreeMap::new(),
            nodes: BTreeMap::new(),
            all_tasks: Vec::new(),
        }
    }

    pub fn config(&self) -> &AmConfig {
        &self.config
    }

    pub fn service_ids(&self) -> Vec<String> {
        self.services.keys().cloned().collect()
    }

    pub fn summary(&self, sid: &str) -> Option<ServiceSummary> {
        self.services.get(sid).map(ServiceEntry::summary)
    }

    /// Admits a new service. A rejected one may be resubmitted.
    pub fn admit(&mut self, spec: ServiceSpec) -> Result<(), Reply> {
        spec.validate().map_err(|e| Reply::error_code(400, e))?;
        if let Some(e) = self.services.get(&spec.service_id) {
            if e.rejected.is_none() {
                return Err(Reply::error_code(409, format!("service {} already deployed", spec.service_id)));
            }
        }
        let sid = spec.service_id.clone();
        self.services.insert(sid, ServiceEntry::new(spec));
        Ok(())
    }

    pub fn reject(&mut self, sid: &str, reason: &str) {
        if let Some(e) = self.services.get_mut(sid) {
            e.rejected = Some(reason.to_string());
        }
    }

    pub fn set_storage(&mut self, sid: &str, set: ReplicaSet) {
        if let Some(e) = self.services.get_mut(sid) {
            if set.degraded {
                e.warning = format!("storage degraded: {} replica(s)", set.replicas.len());
            }
            e.storage = Some(set);
        }
    }

    pub fn warn(&mut self, sid: &str, warning: String) {
        if let Some(e) = self.services.get_mut(sid) {
            if e.warning.is_empty() {
                e.warning = warning;
            } else {
                e.warning = format!("{}; {warning}", e.warning);
            }
        }
    }

    /// Replaces the registry view and refreshes every service's task table.
    /// A node coming alive clears every backoff: failed placements may now fit.
    pub fn observe(&mut self, nodes: Vec<NodeDescriptor>, tasks: Vec<TaskRecord>) {
        let was_alive = |id: &str| self.nodes.get(id).is_some_and(|n| n.state == NodeState::Alive);
        let gained = nodes.iter().any(|n| n.state == NodeState::Alive && !was_alive(&n.node_id));
        if gained {
            for e in self.services.values_mut() {
                e.backoff.clear();
            }
        }
        self.nodes = nodes.into_iter().map(|n| (n.node_id.clone(), n)).collect();
        for t in &tasks {
            if let Some(e) = self.services.get_mut(&t.service_id) {
                e.tasks.insert(t.task_id.clone(), t.clone());
            }
        }
        self.all_tasks = tasks;
    }

    /// The initial deploy actions, cycling over the expected locations.
    pub fn initial_actions(&mut self, sid: &str) -> Vec<ScaleAction> {
        let Some(e) = self.services.get_mut(sid) else { return Vec::new() };
        (0..e.spec.initial_replicas)
            .map(|_| ScaleAction::Deploy {
                kind: ScaleKind::Initial,
                cell: None,
                reason: "initial".into(),
                target: e.next_location(),
                anti_affinity: Vec::new(),
            })
            .collect()
    }

    /// Records an attempted action and its outcome.
    pub fn record(&mut self, sid: &str, action: &ScaleAction, outcome: Result<TaskRecord, String>, now: f64) {
        let base = self.config.backoff_base_ms;
        let max = self.config.backoff_max_ms;
        let Some(e) = self.services.get_mut(sid) else { return };
        let (kind, cell, reason, target) = match action {
            ScaleAction::Deploy {
                kind,
                cell,
                reason,
                target,
                ..
            } => (*kind, cell.clone(), reason.clone(), Some(*target)),
            ScaleAction::Cancel { reason, .. } => (ScaleKind::Down, None, reason.clone(), None),
        };
        let key = match kind {
            ScaleKind::Up => cell.clone(),
            ScaleKind::Floor | ScaleKind::Initial => Some(FLOOR_KEY.to_string()),
            ScaleKind::Down => None,
        };
        let mut ev = ScaleEvent {
            at_ms: now,
            kind,
            cell,
            reason,
            target,
            task_id: None,
            node_id: None,
            ok: outcome.is_ok(),
            detail: String::new(),
        };
        match outcome {
            Ok(rec) => {
                ev.task_id = Some(rec.task_id.clone());
                ev.node_id = Some(rec.node_id.clone());
                if kind == ScaleKind::Down {
                    e.idle_since.remove(&rec.task_id);
                }
                e.tasks.insert(rec.task_id.clone(), rec);
                if let Some(k) = key {
                    e.backoff.remove(&k);
                }
            }
            Err(detail) => {
                if let Some(k) = key {
                    let b = e.backoff.entry(k).or_insert(Backoff {
                        until_ms: now,
                        failures: 0,
                    });
                    b.failures += 1;
                    let wait = (base * 2f64.powi(b.failures as i32 - 1)).min(max);
                    b.until_ms = now + wait;
                }
                ev.detail = detail;
            }
        }
        e.events.push(ev);
    }

    /// Decides this tick's actions for one service: restore the replica
    /// floor first, otherwise scale up for uncovered or overloaded user
    /// cells, otherwise retire at most one long-idle task.
    pub fn plan(&mut self, sid: &str, now: f64) -> Vec<ScaleAction> {
        let cfg = self.config.clone();
        let nodes = &self.nodes;
        let Some(e) = self.services.get_mut(sid) else { return Vec::new() };
        if e.rejected.is_some() {
            return Vec::new();
        }
        e.users.retain(|_, u| now - u.last_seen_ms < cfg.user_ttl_ms);
        let hosts: BTreeSet<String> = e.live().map(|t| t.node_id.clone()).collect();
        let live = e.live().count();

        if live < e.spec.initial_replicas {
            if e.backed_off(FLOOR_KEY, now) {
                return Vec::new();
            }
            let missing = e.spec.initial_replicas - live;
            return (0..missing)
                .map(|_| ScaleAction::Deploy {
                    kind: ScaleKind::Floor,
                    cell: None,
                    reason: format!("{live} live replica(s), floor {}", e.spec.initial_replicas),
                    target: e.next_location(),
                    anti_affinity: hosts.iter().cloned().collect(),
                })
                .collect();
        }
        if !e.spec.autoscale {
            return Vec::new();
        }

        let mut cells: BTreeMap<String, Vec<GeoPoint>> = BTreeMap::new();
        for u in e.users.values() {
            let h = encode(u.loc, cfg.precision).expect("precision valid");
            cells.entry(h.as_str().to_string()).or_default().push(u.loc);
        }
        let req = e.spec.compute_req;
        let mut actions = Vec::new();
        for (cell, pts) in &cells {
            if e.backed_off(cell, now) {
                continue;
            }
            let center = centroid(pts);
            let near = |n: &NodeDescriptor| in_neighborhood(center, n.location, cfg.precision);
            let capacity: f64 = e
                .live()
                .filter_map(|t| nodes.get(&t.node_id))
                .filter(|n| near(n))
                .map(|n| budget(n, req.cpu))
                .sum();
            let covered = e.live().filter_map(|t| nodes.get(&t.node_id)).any(|n| near(n));
            let demand = pts.len() as f64;
            let reason = if !covered {
                format!("{} user(s) with no nearby replica", pts.len())
            } else if demand > cfg.load_factor * capacity {
                format!("demand {demand} exceeds {} x capacity {capacity}", cfg.load_factor)
            } else {
                continue;
            };
            let local_room = nodes.values().any(|n| {
                n.state == NodeState::Alive
                    && near(n)
                    && !hosts.contains(&n.node_id)
                    && n.free_cpu() >= req.cpu
                    && n.free_mem() >= req.mem
            });
            if !local_room {
                continue;
            }
            // soft: the Spinner falls back to these only if nothing local fits
            let anti: Vec<String> = nodes
                .values()
                .filter(|n| hosts.contains(&n.node_id) || !near(n))
                .map(|n| n.node_id.clone())
                .collect();
            actions.push(ScaleAction::Deploy {
                kind: ScaleKind::Up,
                cell: Some(cell.clone()),
                reason,
                target: center,
                anti_affinity: anti,
            });
        }
        if !actions.is_empty() {
            return actions;
        }

        let selected: BTreeSet<&str> = e.users.values().filter_map(|u| u.selected.as_deref()).collect();
        let idle: Vec<String> = e
            .tasks
            .values()
            .filter(|t| t.state == TaskState::Running && t.load == 0 && !selected.contains(t.task_id.as_str()))
            .map(|t| t.task_id.clone())
            .collect();
        e.idle_since.retain(|id, _| idle.contains(id));
        for id in &idle {
            e.idle_since.entry(id.clone()).or_insert(now);
        }
        if live <= e.spec.initial_replicas {
            return Vec::new();
        }
        let victim = e
            .idle_since
            .iter()
            .filter(|(_, since)| now - **since >= cfg.idle_ttl_ms)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(b.0)));
        match victim {
            Some((id, since)) => vec![ScaleAction::Cancel {
                task_id: id.clone(),
                reason: format!("idle for {:.0} ms", now - since),
            }],
            None => Vec::new(),
        }
    }

    /// Step-1 selection; also registers or refreshes the user.
    pub fn select(&mut self, sid: &str, q: &UserQuery, rank: Rank, now: f64) -> Result<CandidateList, Reply> {
        let e = self
            .services
            .get(sid)
            .ok_or_else(|| Reply::error_code(404, format!("unknown service {sid}")))?;
        if let Some(r) = &e.rejected {
            return Err(Reply::error_code(503, format!("service unavailable: {r}")));
        }
        let mut inflight: BTreeMap<&str, u32> = BTreeMap::new();
        for t in self.all_tasks.iter().filter(|t| !t.state.is_terminal()) {
            *inflight.entry(t.node_id.as_str()).or_default() += t.load;
        }
        let hosts: Vec<Hosted> = e
            .tasks
            .values()
            .filter(|t| t.state == TaskState::Running && t.endpoint.is_some())
            .filter_map(|t| {
                let node = self.nodes.get(&t.node_id).filter(|n| n.state != NodeState::Dead)?;
                Some(Hosted {
                    task: t.clone(),
                    node: node.clone(),
                    inflight: inflight.get(t.node_id.as_str()).copied().unwrap_or(0),
                })
            })
            .collect();
        if hosts.is_empty() {
            return Err(Reply::error_code(503, "service unavailable: no running replica"));
        }
        let top_n = e.spec.top_n;
        let entries = candidates(q, &hosts, &self.config.weights, self.config.precision, top_n, rank);
        let e = self.services.get_mut(sid).expect("checked above");
        let u = e.users.entry(q.user_id.clone()).or_insert(UserEntry {
            loc: q.loc,
            last_seen_ms: now,
            selected: None,
        });
        u.loc = q.loc;
        u.last_seen_ms = now;
        Ok(CandidateList {
            service_id: sid.to_string(),
            entries,
            top_n,
        })
    }

    pub fn report_selection(&mut self, sid: &str, user_id: &str, task_id: &str, now: f64) -> Result<(), Reply> {
        let e = self
            .services
            .get_mut(sid)
            .ok_or_else(|| Reply::error_code(404, format!("unknown service {sid}")))?;
        let u = e
            .users
            .get_mut(user_id)
            .ok_or_else(|| Reply::error_code(404, format!("unknown user {user_id}")))?;
        u.selected = Some(task_id.to_string());
        u.last_seen_ms = now;
        Ok(())
    }
}

/// The Application Manager service.
pub struct AppManager {
    id: String,
    net: SharedTransport,
    clock: Clock,
    state: Mutex<AmState>,
    /// Serializes deploys and scaling commits.
    writer: tokio::sync::Mutex<()>,
}

impl AppManager {
    pub fn new(id: &str, net: SharedTransport, clock: Clock, config: AmConfig) -> Arc<Self> {
        Arc::new(AppManager {
            id: id.to_string(),
            net,
            clock,
            state: Mutex::new(AmState::new(config)),
            writer: tokio::sync::Mutex::new(()),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_state<R>(&self, f: impl FnOnce(&mut AmState) -> R) -> R {
        f(&mut self.state.lock())
    }

    fn config(&self) -> AmConfig {
        self.state.lock().config.clone()
    }

    async fn spinner<R: serde::de::DeserializeOwned>(&self, req: &SpinnerRequest, timeout: Option<Duration>) -> Result<R, CallError> {
        let dst = self.config().spinner;
        request(self.net.as_ref(), &self.id, &dst, req, timeout).await
    }

    /// Pulls the registry and task table, then plans and executes scaling.
    pub fn spawn_poller(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            let period = ms_duration(me.config().poll_ms);
            loop {
                tokio::time::sleep(period).await;
                me.poll_once().await;
            }
        })
    }

    pub async fn poll_once(&self) {
        let nodes: Result<Vec<NodeDescriptor>, _> = self.spinner(&SpinnerRequest::ListNodes, None).await;
        let tasks: Result<Vec<TaskRecord>, _> = self.spinner(&SpinnerRequest::ListTasks { service_id: None }, None).await;
        let (nodes, tasks) = match (nodes, tasks) {
            (Ok(n), Ok(t)) => (n, t),
            (Err(e), _) | (_, Err(e)) => {
                debug!(error = %e, "spinner poll failed");
                return;
            }
        };
        let _w = self.writer.lock().await;
        self.state.lock().observe(nodes, tasks);
        let sids = self.state.lock().service_ids();
        for sid in sids {
            let now = self.clock.now_ms();
            let actions = self.state.lock().plan(&sid, now);
            self.execute(&sid, actions).await;
        }
    }

    /// Runs actions in order. Nodes receiving a replica are added to the
    /// anti-affinity of the following deploys.
    async fn execute(&self, sid: &str, actions: Vec<ScaleAction>) -> usize {
        let cfg = self.config();
        let mut placed_on: Vec<String> = Vec::new();
        let mut ok = 0;
        for mut action in actions {
            let outcome = match &mut action {
                ScaleAction::Deploy {
                    target, anti_affinity, ..
                } => {
                    for n in &placed_on {
                        if !anti_affinity.contains(n) {
                            anti_affinity.push(n.clone());
                        }
                    }
                    let spec = self.state.lock().services.get(sid).map(|e| e.spec.clone());
                    let Some(spec) = spec else { return ok };
                    let req = spec.task_request(*target, anti_affinity.clone());
                    let r: Result<DeployAck, _> =
                        self.spinner(&SpinnerRequest::TaskDeploy(req), Some(cfg.deploy_timeout)).await;
                    r.map(|ack| ack.task).map_err(|e| e.to_string())
                }
                ScaleAction::Cancel { task_id, .. } => {
                    let msg = SpinnerRequest::TaskCancel {
                        task_id: task_id.clone(),
                    };
                    self.spinner::<TaskRecord>(&msg, None).await.map_err(|e| e.to_string())
                }
            };
            match &outcome {
                Ok(rec) => {
                    ok += 1;
                    placed_on.push(rec.node_id.clone());
                    info!(service = %sid, task = %rec.task_id, node = %rec.node_id, ?action, "scale action");
                }
                Err(e) => warn!(service = %sid, error = %e, ?action, "scale action failed"),
            }
            let now = self.clock.now_ms();
            self.state.lock().record(sid, &action, outcome, now);
        }
        ok
    }

    pub async fn deploy_service(&self, spec: ServiceSpec) -> Result<Reply, Reply> {
        let _w = self.writer.lock().await;
        let sid = spec.service_id.clone();
        self.state.lock().admit(spec.clone())?;
        let cfg = self.config();
        if let Some(s) = &spec.storage_req {
            let msg = ManagerRequest::StoreRegister {
                service_id: sid.clone(),
                capacity_mb: s.capacity_mb,
                consistency: s.consistency,
                data_source: s.data_source.clone(),
                locations: spec.locations.clone(),
            };
            let r: Result<ReplicaSet, _> =
                request(self.net.as_ref(), &self.id, &cfg.cargo_mgr, &msg, Some(cfg.storage_timeout)).await;
            match r {
                Ok(set) => self.state.lock().set_storage(&sid, set),
                Err(e) => {
                    let reason = format!("storage registration failed: {e}");
                    warn!(service = %sid, %reason, "service rejected");
                    self.state.lock().reject(&sid, &reason);
                    return Err(Reply::error_code(503, reason));
                }
            }
        }
        let actions = self.state.lock().initial_actions(&sid);
        let wanted = actions.len();
        let placed = self.execute(&sid, actions).await;
        let mut st = self.state.lock();
        if placed == 0 {
            let last = st
                .services
                .get(&sid)
                .and_then(|e| e.events.last())
                .map(|ev| ev.detail.clone())
                .unwrap_or_default();
            let reason = format!("no replica could be placed: {last}");
            st.reject(&sid, &reason);
            return Err(Reply::error_code(503, reason));
        }
        if placed < wanted {
            st.warn(&sid, format!("only {placed} of {wanted} replicas placed"));
        }
        let summary = st.summary(&sid).expect("admitted");
        info!(service = %sid, placed, "service deployed");
        let reply = DeployReply {
            service_id: sid,
            status: summary.status,
            tasks: summary.tasks,
            storage: summary.storage,
        };
        Ok(Reply::ok_detail(reply, summary.detail))
    }

    async fn dispatch(&self, req: AmRequest) -> Result<Reply, Reply> {
        let now = self.clock.now_ms();
        match req {
            AmRequest::DeployService(spec) => self.deploy_service(spec).await,
            AmRequest::ServiceSelect { service_id, query, rank } => {
                Ok(Reply::ok(self.state.lock().select(&service_id, &query, rank, now)?))
            }
            AmRequest::ReportSelection {
                service_id,
                user_id,
                task_id,
            } => {
                self.state.lock().report_selection(&service_id, &user_id, &task_id, now)?;
                Ok(Reply::ok(Value::Null))
            }
            AmRequest::ServiceStatus { service_id } => {
                let s = self.state.lock().summary(&service_id);
                let s = s.ok_or_else(|| Reply::error_code(404, format!("unknown service {service_id}")))?;
                let detail = s.detail.clone();
                Ok(Reply::ok_detail(s, detail))
            }
            AmRequest::ListServices => {
                let st = self.state.lock();
                let all: Vec<(String, ServiceStatus)> = st
                    .service_ids()
                    .into_iter()
                    .filter_map(|id| st.summary(&id).map(|s| (id, s.status)))
                    .collect();
                Ok(Reply::ok(all))
            }
        }
    }
}

#[async_trait]
impl Handler for AppManager {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let reply = match decode_request::<AmRequest>(&request) {
            Ok(req) => self.dispatch(req).await.into(),
            Err(r) => r,
        };
        reply.to_bytes()
    }
}
