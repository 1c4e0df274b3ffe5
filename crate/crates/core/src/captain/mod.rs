//! Captain: the agent on each compute node. Runs tasks through a fake
//! container runtime, serves workload requests on per-task endpoints,
//! heartbeats to the Spinner and picks a Cargo access point by probing.

pub mod ps;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;
use tokio::time::Instant;
use tracing::{debug, info, warn};

pub use ps::ProcessorSharing;

use crate::netharness::{failed, ms_duration, Clock, Endpoint, Handler, Mode, NetError, NodeStatus, SharedTransport};
use crate::proto::{decode_request, request, via_beacon, CallError, Reply, Status, Target};
use crate::scheduler::{CaptainUpdate, ImageRef, NodeDescriptor, SpinnerRequest, TaskRecord, TaskRequest, TaskState, REREGISTER};
use crate::storage::store::PROBE_KEY;
use crate::storage::{CargoCandidate, CargoRequest, ManagerRequest, MatchReply, ProbeFeedback, ReadReply, WriteAck};

pub const COMPUTE_ECHO: &str = "compute-echo";
pub const VECTOR_MATCH: &str = "vector-match";
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.6;
/// Error detail for requests that reach a task which is not serving.
pub const NOT_RUNNING: &str = "task not running";

/// Spinner-to-Captain messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum CaptainRequest {
    TaskDeploy { task_id: String, request: TaskRequest },
    TaskCancel { task_id: String },
    Prefetch { image: ImageRef },
    Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Infer,
    Read,
    Write,
}

/// Application request sent to a task endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkRequest {
    pub service_id: String,
    pub op: Op,
    #[serde(default)]
    pub payload: Value,
}

impl WorkRequest {
    /// The minimal frame used for probing.
    pub fn probe(service_id: &str) -> Self {
        WorkRequest {
            service_id: service_id.to_string(),
            op: Op::Infer,
            payload: Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkReply {
    pub status: Status,
    #[serde(default)]
    pub result: Value,
    pub server_ms: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl WorkReply {
    fn error(detail: impl Into<String>) -> Self {
        WorkReply {
            status: Status::Error,
            result: Value::Null,
            server_ms: 0.0,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaptainConfig {
    pub node: NodeDescriptor,
    /// Multiplies every task's per-frame processing time on this node.
    pub speed_factor: f64,
    pub beacon: Endpoint,
    pub heartbeat_ms: f64,
    pub cargo_retry_ms: f64,
    /// Re-discovery period for Cargo access points; also paces probe feedback.
    pub cargo_refresh_ms: f64,
    pub probe_reads: usize,
    pub data_timeout: Duration,
    /// Join the Spinner and heartbeat. Off for a standalone server such as a
    /// cloud baseline that is deployed to directly.
    pub register: bool,
}

impl CaptainConfig {
    pub fn new(node: NodeDescriptor, beacon: Endpoint) -> Self {
        CaptainConfig {
            node,
            speed_factor: 1.0,
            beacon,
            heartbeat_ms: 2000.0,
            cargo_retry_ms: 5000.0,
            cargo_refresh_ms: 5000.0,
            probe_reads: 3,
            data_timeout: Duration::from_millis(1000),
            register: true,
        }
    }
}

/// Probed Cargo choice for one service on this node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StorageAccess {
    /// Selected first, then failover order.
    pub order: Vec<CargoCandidate>,
    /// Median probe latency per cargo; absent when unreachable.
    pub probes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptainSnapshot {
    pub node_id: String,
    pub incarnation: u64,
    pub cpu_used: f64,
    pub mem_used: f64,
    pub tasks: Vec<TaskRecord>,
    pub image_layers: BTreeSet<String>,
    pub storage: BTreeMap<String, StorageAccess>,
    pub discover_calls: u64,
}

struct LocalTask {
    rec: TaskRecord,
    req: TaskRequest,
    cancel: watch::Sender<bool>,
    served: u64,
}

#[derive(Default)]
struct CaptainState {
    tasks: BTreeMap<String, LocalTask>,
    layers: BTreeSet<String>,
    incarnation: u64,
    storage: BTreeMap<String, StorageAccess>,
    discover_calls: u64,
}

pub struct Captain {
    id: String,
    net: SharedTransport,
    clock: Clock,
    cfg: CaptainConfig,
    control: Mutex<Endpoint>,
    state: Mutex<CaptainState>,
    cpu: Arc<ProcessorSharing>,
    me: Weak<Captain>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl Captain {
    pub fn new(net: SharedTransport, clock: Clock, cfg: CaptainConfig) -> Arc<Self> {
        let mut st = CaptainState::default();
        st.layers = cfg.node.image_layers.clone();
        Arc::new_cyclic(|me| Captain {
            id: cfg.node.node_id.clone(),
            control: Mutex::new(Endpoint::node(&cfg.node.node_id)),
            cpu: ProcessorSharing::new(cfg.node.cpu_capacity),
            net,
            clock,
            cfg,
            state: Mutex::new(st),
            me: me.clone(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn control_endpoint(&self) -> Endpoint {
        self.control.lock().clone()
    }

    pub async fn start(self: &Arc<Self>) -> Result<Endpoint, NetError> {
        let want = self.cfg.node.endpoint.clone().unwrap_or_else(|| Endpoint::node(&self.id));
        let ep = self.net.bind(want, self.clone()).await?;
        *self.control.lock() = ep.clone();
        if self.cfg.register {
            if let Err(e) = self.join().await {
                debug!(node = %self.id, error = %e, "initial join failed; heartbeat will retry");
            }
            self.spawn_heartbeat();
        }
        self.spawn_crash_watch();
        Ok(ep)
    }

    fn descriptor(&self) -> NodeDescriptor {
        let snap = self.snapshot();
        let mut d = self.cfg.node.clone();
        d.endpoint = Some(self.control_endpoint());
        d.cpu_used = snap.cpu_used;
        d.mem_used = snap.mem_used;
        d.image_layers = snap.image_layers;
        d
    }

    async fn join(&self) -> Result<Value, CallError> {
        let msg = SpinnerRequest::CaptainJoin(self.descriptor());
        via_beacon(self.net.as_ref(), &self.id, &self.cfg.beacon, Target::Spinner, &msg, None).await
    }

    pub fn snapshot(&self) -> CaptainSnapshot {
        let st = self.state.lock();
        let live = st.tasks.values().filter(|t| !t.rec.state.is_terminal());
        let (cpu, mem) = live.fold((0.0, 0.0), |(c, m), t| (c + t.rec.cpu_used, m + t.rec.mem_used));
        CaptainSnapshot {
            node_id: self.id.clone(),
            incarnation: st.incarnation,
            cpu_used: cpu,
            mem_used: mem,
            tasks: st.tasks.values().map(|t| t.rec.clone()).collect(),
            image_layers: st.layers.clone(),
            storage: st.storage.clone(),
            discover_calls: st.discover_calls,
        }
    }

    fn update_msg(&self) -> SpinnerRequest {
        let s = self.snapshot();
        SpinnerRequest::CaptainUpdate(CaptainUpdate {
            node_id: s.node_id,
            cpu_used: s.cpu_used,
            mem_used: s.mem_used,
            tasks: s.tasks,
            image_layers: s.image_layers,
            incarnation: s.incarnation,
        })
    }

    async fn send_update(&self) {
        if !self.cfg.register || !self.net.liveness().is_up(&self.id) {
            return;
        }
        let r: Result<Value, _> =
            via_beacon(self.net.as_ref(), &self.id, &self.cfg.beacon, Target::Spinner, &self.update_msg(), None).await;
        match r {
            Err(e) if e.code() == Some(REREGISTER) => {
                if self.join().await.is_ok() {
                    let _: Result<Value, _> = via_beacon(
                        self.net.as_ref(),
                        &self.id,
                        &self.cfg.beacon,
                        Target::Spinner,
                        &self.update_msg(),
                        None,
                    )
                    .await;
                }
            }
            Err(e) => debug!(node = %self.id, error = %e, "heartbeat failed"),
            Ok(_) => {}
        }
    }

    /// Immediate out-of-band heartbeat after a task state change.
    fn notify(&self) {
        if let Some(me) = self.me.upgrade() {
            tokio::spawn(async move { me.send_update().await });
        }
    }

    fn spawn_heartbeat(self: &Arc<Self>) {
        let me = self.clone();
        tokio::spawn(async move {
            let mut was_up = true;
            loop {
                tokio::time::sleep(ms_duration(me.cfg.heartbeat_ms)).await;
                let up = me.net.liveness().status(&me.id) == NodeStatus::Up;
                if !up && was_up && me.net.liveness().status(&me.id) == NodeStatus::Down {
                    me.crash();
                }
                was_up = up;
                if up {
                    me.send_update().await;
                }
            }
        });
    }

    fn spawn_crash_watch(self: &Arc<Self>) {
        let me = self.clone();
        let mut rx = self.net.liveness().subscribe(&self.id);
        tokio::spawn(async move {
            loop {
                failed(&mut rx).await;
                me.crash();
            }
        });
    }

    /// Node went down: running tasks and their endpoints are gone. The image
    /// cache survives.
    fn crash(&self) {
        let tasks = {
            let mut st = self.state.lock();
            st.incarnation += 1;
            st.storage.clear();
            std::mem::take(&mut st.tasks)
        };
        if !tasks.is_empty() {
            warn!(node = %self.id, tasks = tasks.len(), "node down; tasks lost");
        }
        for (_, t) in tasks {
            t.cancel.send_replace(true);
            if let Some(ep) = &t.rec.endpoint {
                self.net.unbind(&ep.address);
            }
        }
    }

    fn set_state(&self, task_id: &str, state: TaskState, f: impl FnOnce(&mut TaskRecord)) -> bool {
        let ok = {
            let mut st = self.state.lock();
            match st.tasks.get_mut(task_id) {
                Some(t) if t.rec.state.can_move_to(state) && !t.rec.state.is_terminal() => {
                    t.rec.state = state;
                    f(&mut t.rec);
                    true
                }
                _ => false,
            }
        };
        if ok {
            debug!(node = %self.id, task = %task_id, ?state, "task state");
            self.notify();
        }
        ok
    }

    fn deploy(&self, task_id: String, req: TaskRequest) -> Result<TaskRecord, String> {
        let mut rec = TaskRecord::new(&task_id, &req.service_id, &self.id, req.compute_req);
        let known = matches!(req.workload.handler.as_str(), COMPUTE_ECHO | VECTOR_MATCH);
        let (cancel, cancel_rx) = watch::channel(false);
        let verdict = {
            let mut st = self.state.lock();
            if let Some(existing) = st.tasks.get(&task_id) {
                return Ok(existing.rec.clone());
            }
            let (cpu, mem) = st
                .tasks
                .values()
                .filter(|t| !t.rec.state.is_terminal())
                .fold((0.0, 0.0), |(c, m), t| (c + t.rec.cpu_used, m + t.rec.mem_used));
            let node = &self.cfg.node;
            let verdict = if !known {
                Err(format!("unknown handler {}", req.workload.handler))
            } else if cpu + req.compute_req.cpu > node.cpu_capacity + 1e-9
                || mem + req.compute_req.mem > node.mem_capacity + 1e-9
            {
                Err("insufficient resources".to_string())
            } else {
                Ok(())
            };
            if let Err(reason) = &verdict {
                rec.state = TaskState::Failed;
                rec.detail = reason.clone();
            }
            st.tasks.insert(
                task_id.clone(),
                LocalTask {
                    rec: rec.clone(),
                    req: req.clone(),
                    cancel,
                    served: 0,
                },
            );
            verdict
        };
        verdict?;
        let me = self.me.upgrade().ok_or("captain stopped")?;
        let at = Instant::now();
        tokio::spawn(me.clone().run_task(task_id.clone(), req.clone(), cancel_rx, at));
        if req.need_storage {
            let sid = req.service_id.clone();
            tokio::spawn(async move { me.storage_loop(sid, task_id).await });
        }
        Ok(rec)
    }

    async fn wait_or_cancel(cancel: &mut watch::Receiver<bool>, ms: f64) -> bool {
        if *cancel.borrow() {
            return false;
        }
        if ms <= 0.0 {
            return true;
        }
        let slept = tokio::select! {
            biased;
            _ = tokio::time::sleep(ms_duration(ms)) => true,
            _ = cancel.wait_for(|c| *c) => false,
        };
        slept && !*cancel.borrow()
    }

    async fn run_task(self: Arc<Self>, task_id: String, req: TaskRequest, mut cancel: watch::Receiver<bool>, at: Instant) {
        if !self.set_state(&task_id, TaskState::Pulling, |_| {}) {
            return;
        }
        for layer in &req.image.layers {
            if self.state.lock().layers.contains(&layer.digest) {
                continue;
            }
            if !Self::wait_or_cancel(&mut cancel, layer.pull_ms as f64).await {
                return;
            }
            self.state.lock().layers.insert(layer.digest.clone());
        }
        if !self.set_state(&task_id, TaskState::Starting, |_| {}) {
            return;
        }
        if !Self::wait_or_cancel(&mut cancel, req.image.start_ms as f64).await {
            return;
        }
        let want = match self.net.mode() {
            Mode::Emulated => Endpoint::new(&self.id, format!("{}/{}", self.id, task_id)),
            Mode::Tcp => {
                let host = self.control_endpoint().address;
                let host = host.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h).to_string();
                Endpoint::new(&self.id, format!("{host}:0"))
            }
        };
        let handler = Arc::new(TaskEndpoint {
            captain: self.me.clone(),
            task_id: task_id.clone(),
        });
        let ep = match self.net.bind(want, handler).await {
            Ok(ep) => ep,
            Err(e) => {
                self.set_state(&task_id, TaskState::Failed, |r| r.detail = format!("endpoint: {e}"));
                return;
            }
        };
        let startup = at.elapsed().as_secs_f64() * 1000.0;
        let now = self.clock.now_ms();
        let ep2 = ep.clone();
        if !self.set_state(&task_id, TaskState::Running, move |r| {
            r.endpoint = Some(ep2);
            r.started_at_ms = Some(now);
            r.startup_ms = Some(startup);
        }) {
            self.net.unbind(&ep.address);
            return;
        }
        info!(node = %self.id, task = %task_id, startup_ms = startup, "task running");
    }

    fn cancel(&self, task_id: &str) -> Result<TaskRecord, String> {
        let ep = {
            let st = self.state.lock();
            let t = st.tasks.get(task_id).ok_or_else(|| format!("unknown task {task_id}"))?;
            t.cancel.send_replace(true);
            t.rec.endpoint.clone()
        };
        if let Some(ep) = ep {
            self.net.unbind(&ep.address);
        }
        self.set_state(task_id, TaskState::Cancelled, |r| r.endpoint = None);
        let st = self.state.lock();
        Ok(st.tasks[task_id].rec.clone())
    }

    fn prefetch(&self, image: ImageRef) {
        let Some(me) = self.me.upgrade() else { return };
        tokio::spawn(async move {
            for layer in image.layers {
                if me.state.lock().layers.contains(&layer.digest) {
                    continue;
                }
                tokio::time::sleep(ms_duration(layer.pull_ms as f64)).await;
                me.state.lock().layers.insert(layer.digest);
            }
            me.send_update().await;
        });
    }

    fn task_alive(&self, task_id: &str) -> bool {
        self.state
            .lock()
            .tasks
            .get(task_id)
            .is_some_and(|t| !t.rec.state.is_terminal())
    }

    /// Discovers and probes Cargo access points until the task ends.
    async fn storage_loop(self: Arc<Self>, service_id: String, task_id: String) {
        loop {
            if !self.task_alive(&task_id) {
                return;
            }
            let wait = match self.discover_cargo(&service_id).await {
                Ok(_) => self.cfg.cargo_refresh_ms,
                Err(e) => {
                    debug!(node = %self.id, service = %service_id, error = %e, "cargo discovery failed");
                    self.cfg.cargo_retry_ms
                }
            };
            tokio::time::sleep(ms_duration(wait)).await;
        }
    }

    async fn probe_cargo(&self, service_id: &str, c: &CargoCandidate) -> Option<f64> {
        let mut samples = Vec::with_capacity(self.cfg.probe_reads);
        for _ in 0..self.cfg.probe_reads {
            let msg = CargoRequest::Read {
                service_id: service_id.to_string(),
                key: PROBE_KEY.to_string(),
            };
            let t = Instant::now();
            let r: Result<ReadReply, _> =
                request(self.net.as_ref(), &self.id, &c.endpoint, &msg, Some(self.cfg.data_timeout)).await;
            r.ok()?;
            samples.push(t.elapsed().as_secs_f64() * 1000.0);
        }
        Some(median(samples))
    }

    /// Gets candidates from the Cargo Manager, probes each with sequential
    /// sentinel reads and keeps them ordered by median latency.
    pub async fn discover_cargo(&self, service_id: &str) -> Result<StorageAccess, CallError> {
        self.state.lock().discover_calls += 1;
        let msg = ManagerRequest::CargoDiscover {
            node_id: self.id.clone(),
            location: self.cfg.node.location,
            service_id: service_id.to_string(),
        };
        let cands: Vec<CargoCandidate> =
            via_beacon(self.net.as_ref(), &self.id, &self.cfg.beacon, Target::CargoMgr, &msg, None).await?;
        let mut probes = BTreeMap::new();
        for c in &cands {
            if let Some(ms) = self.probe_cargo(service_id, c).await {
                probes.insert(c.node_id.clone(), ms);
            }
        }
        let mut order = cands;
        // probed ones by latency, unreachable ones last in manager order
        order.sort_by(|a, b| {
            let la = probes.get(&a.node_id).copied().unwrap_or(f64::INFINITY);
            let lb = probes.get(&b.node_id).copied().unwrap_or(f64::INFINITY);
            la.partial_cmp(&lb).unwrap_or(std::cmp::Ordering::Equal)
        });
        let access = StorageAccess { order, probes };
        if let Some(best) = access.order.first() {
            if let Some(&best_ms) = access.probes.get(&best.node_id) {
                let fb = ManagerRequest::ProbeFeedback(ProbeFeedback {
                    captain_id: self.id.clone(),
                    location: self.cfg.node.location,
                    service_id: service_id.to_string(),
                    best_cargo: best.node_id.clone(),
                    best_ms,
                });
                let _: Result<Value, _> =
                    via_beacon(self.net.as_ref(), &self.id, &self.cfg.beacon, Target::CargoMgr, &fb, None).await;
            }
        }
        self.state.lock().storage.insert(service_id.to_string(), access.clone());
        Ok(access)
    }

    /// Sends a data request to the selected Cargo, failing over to the next
    /// candidate on transport errors without asking the manager again.
    async fn data_call(&self, service_id: &str, req: &CargoRequest) -> Result<Value, String> {
        loop {
            let target = self
                .state
                .lock()
                .storage
                .get(service_id)
                .and_then(|s| s.order.first().cloned())
                .ok_or_else(|| "no cargo access point yet".to_string())?;
            let r: Result<Value, _> =
                request(self.net.as_ref(), &self.id, &target.endpoint, req, Some(self.cfg.data_timeout)).await;
            match r {
                Ok(v) => return Ok(v),
                Err(CallError::Net(e)) if !matches!(e, NetError::SourceDown(_)) => {
                    warn!(node = %self.id, cargo = %target.node_id, error = %e, "cargo failover");
                    if let Some(s) = self.state.lock().storage.get_mut(service_id) {
                        s.order.retain(|c| c.node_id != target.node_id);
                    }
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    }

    async fn serve(&self, task_id: &str, req: WorkRequest) -> WorkReply {
        let (workload, n) = {
            let mut st = self.state.lock();
            let Some(t) = st.tasks.get_mut(task_id) else {
                return WorkReply::error(NOT_RUNNING);
            };
            if t.rec.state != TaskState::Running {
                return WorkReply::error(NOT_RUNNING);
            }
            if t.rec.service_id != req.service_id {
                return WorkReply::error(format!("task serves {}, not {}", t.rec.service_id, req.service_id));
            }
            t.rec.load += 1;
            t.served += 1;
            (t.req.workload.clone(), t.served)
        };
        let t0 = Instant::now();
        let result = self.execute(&req, &workload.handler, workload.processing_ms, n).await;
        {
            let mut st = self.state.lock();
            if let Some(t) = st.tasks.get_mut(task_id) {
                t.rec.load = t.rec.load.saturating_sub(1);
            }
        }
        let server_ms = t0.elapsed().as_secs_f64() * 1000.0;
        match result {
            Ok(result) => WorkReply {
                status: Status::Ok,
                result,
                server_ms,
                detail: String::new(),
            },
            Err(detail) => WorkReply {
                server_ms,
                ..WorkReply::error(detail)
            },
        }
    }

    async fn execute(&self, req: &WorkRequest, handler: &str, processing_ms: f64, n: u64) -> Result<Value, String> {
        let sid = &req.service_id;
        match req.op {
            Op::Infer => {
                self.cpu.run(processing_ms * self.cfg.speed_factor).await;
                if handler == VECTOR_MATCH {
                    if let Some(q) = req.payload.get("vector") {
                        let query: Vec<f64> = serde_json::from_value(q.clone()).map_err(|e| e.to_string())?;
                        let threshold = req.payload.get("threshold").and_then(Value::as_f64).unwrap_or(DEFAULT_MATCH_THRESHOLD);
                        let msg = CargoRequest::VectorMatch {
                            service_id: sid.clone(),
                            query,
                            threshold,
                        };
                        let m: MatchReply = serde_json::from_value(self.data_call(sid, &msg).await?).map_err(|e| e.to_string())?;
                        return Ok(json!({"key": m.key, "distance": m.distance}));
                    }
                }
                Ok(json!({"id": n}))
            }
            Op::Read => {
                let key = req.payload.get("key").and_then(Value::as_str).ok_or("read needs a key")?;
                let msg = CargoRequest::Read {
                    service_id: sid.clone(),
                    key: key.to_string(),
                };
                let r: ReadReply = serde_json::from_value(self.data_call(sid, &msg).await?).map_err(|e| e.to_string())?;
                Ok(json!({"found": r.record.is_some(), "value": r.record.map(|r| hex::encode(r.value))}))
            }
            Op::Write => {
                let key = req.payload.get("key").and_then(Value::as_str).ok_or("write needs a key")?;
                let value = req.payload.get("value").and_then(Value::as_str).unwrap_or_default();
                let value = hex::decode(value).map_err(|e| format!("value must be hex: {e}"))?;
                let msg = CargoRequest::Write {
                    service_id: sid.clone(),
                    key: key.to_string(),
                    value,
                };
                let ack: WriteAck = serde_json::from_value(self.data_call(sid, &msg).await?).map_err(|e| e.to_string())?;
                Ok(json!({"version": ack.version}))
            }
        }
    }

    fn dispatch(&self, req: CaptainRequest) -> Reply {
        match req {
            CaptainRequest::TaskDeploy { task_id, request } => match self.deploy(task_id, request) {
                Ok(rec) => Reply::ok(rec),
                Err(e) => Reply::error_code(503, e),
            },
            CaptainRequest::TaskCancel { task_id } => match self.cancel(&task_id) {
                Ok(rec) => Reply::ok(rec),
                Err(e) => Reply::error_code(404, e),
            },
            CaptainRequest::Prefetch { image } => {
                self.prefetch(image);
                Reply::ok(Value::Null)
            }
            CaptainRequest::Status => Reply::ok(self.snapshot()),
        }
    }
}

#[async_trait]
impl Handler for Captain {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let reply = match decode_request::<CaptainRequest>(&request) {
            Ok(req) => self.dispatch(req),
            Err(r) => r,
        };
        reply.to_bytes()
    }
}

struct TaskEndpoint {
    captain: Weak<Captain>,
    task_id: String,
}

#[async_trait]
impl Handler for TaskEndpoint {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let reply = match (self.captain.upgrade(), serde_json::from_slice::<WorkRequest>(&request)) {
            (Some(c), Ok(req)) => c.serve(&self.task_id, req).await,
            (None, _) => WorkReply::error(NOT_RUNNING),
            (_, Err(e)) => WorkReply::error(format!("malformed request: {e}")),
        };
        serde_json::to_vec(&reply).expect("reply serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![42.0, 38.0, 50.0]), 42.0);
        assert_eq!(median(vec![1.0, 3.0]), 2.0);
    }

    #[test]
    fn work_wire_shape() {
        let r: WorkRequest = serde_json::from_str(r#"{"service_id":"s","op":"infer","payload":null}"#).unwrap();
        assert_eq!(r, WorkRequest::probe("s"));
        let reply = serde_json::to_value(WorkReply::error("x")).unwrap();
        assert_eq!(reply["status"], "error");
        assert!(reply.get("server_ms").is_some());
    }
}
