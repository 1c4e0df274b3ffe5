//! Scenario runner: boots a complete emulated deployment from a config,
//! replays churn, drives clients under virtual time and collects metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::time::Instant;
use tracing::info;

use crate::captain::{Captain, CaptainConfig, CaptainRequest};
use crate::client_sdk::{to_csv, Client, CSV_HEADER, ClientConfig, Outcome, RequestLog, SelectMode};
use crate::control_plane::{AmConfig, AmRequest, AppManager, Beacon, SelectWeights, ServiceSpec, ServiceSummary};
use crate::geo::{GeoPoint, DEFAULT_PRECISION};
use crate::netharness::{
    apply_churn, ms_duration, rpc, ChurnEvent, ChurnScript, Clock, EmulatedNet, Endpoint, LatencyMatrix,
    SharedTransport, TcpNet,
};
use crate::proto::{envelope, Reply, Target};
use crate::scheduler::{
    Comparator, CustomPolicy, NetType, NodeDescriptor, Predicate, Spinner, SpinnerConfig, TaskRecord, TaskState,
};
use crate::storage::{Cargo, CargoConfig, CargoDescriptor, CargoManager, ManagerConfig};

pub const BEACON: &str = "beacon";
pub const AM: &str = "am";
pub const SPINNER: &str = "spinner";
pub const CARGO_MGR: &str = "cargo_mgr";
pub const OPERATOR: &str = "operator";
const CONTROL_IDS: [&str; 5] = [BEACON, AM, SPINNER, CARGO_MGR, OPERATOR];
pub const DEDICATED_POLICY: &str = "dedicated-only";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn yes() -> bool {
    true
}

fn wifi() -> NetType {
    NetType::Wifi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSeed {
    pub node_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "wifi")]
    pub net_type: NetType,
    pub cpu: f64,
    #[serde(default = "NodeSeed::default_mem")]
    pub mem: f64,
    #[serde(default)]
    pub dedicated: bool,
    /// Per-frame processing time on this node; overrides `speed_factor`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processing_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<String>,
    /// Standalone remote server used by the cloud baseline and as the
    /// clients' last-resort standby. Never scheduled by the Spinner.
    #[serde(default)]
    pub cloud: bool,
    /// Present at start; otherwise it arrives through a churn JOIN.
    #[serde(default = "yes")]
    pub up: bool,
}

impl NodeSeed {
    fn default_mem() -> f64 {
        8192.0
    }

    pub fn new(node_id: &str, lat: f64, lon: f64, cpu: f64) -> Self {
        NodeSeed {
            node_id: node_id.to_string(),
            lat,
            lon,
            net_type: NetType::Wifi,
            cpu,
            mem: Self::default_mem(),
            dedicated: false,
            processing_ms: None,
            speed_factor: None,
            layers: Vec::new(),
            cloud: false,
            up: true,
        }
    }

    pub fn processing(mut self, ms: f64) -> Self {
        self.processing_ms = Some(ms);
        self
    }

    pub fn dedicated(mut self) -> Self {
        self.dedicated = true;
        self
    }

    pub fn cloud(mut self) -> Self {
        self.cloud = true;
        self
    }

    pub fn down(mut self) -> Self {
        self.up = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CargoSeed {
    pub node_id: String,
    pub lat: f64,
    pub lon: f64,
    pub capacity_mb: f64,
    #[serde(default = "yes")]
    pub up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSeed {
    pub user_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub start_at_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_ms: Option<f64>,
    #[serde(default = "ClientSeed::default_fps")]
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_type: Option<NetType>,
}

impl ClientSeed {
    fn default_fps() -> f64 {
        10.0
    }

    pub fn new(user_id: &str, lat: f64, lon: f64) -> Self {
        ClientSeed {
            user_id: user_id.to_string(),
            lat,
            lon,
            start_at_ms: 0.0,
            stop_at_ms: None,
            fps: Self::default_fps(),
            frames: None,
            net_type: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientTuning {
    pub probe_count: usize,
    pub reselect_ms: f64,
    pub switch_margin: f64,
    pub request_timeout_ms: f64,
    pub requery: bool,
    /// Configure the cloud node as every client's final standby.
    pub cloud_standby: bool,
}

impl Default for ClientTuning {
    fn default() -> Self {
        ClientTuning {
            probe_count: 5,
            reselect_ms: 10_000.0,
            switch_margin: 0.1,
            request_timeout_ms: 1000.0,
            requery: true,
            cloud_standby: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmTuning {
    pub poll_ms: f64,
    pub user_ttl_ms: f64,
    pub idle_ttl_ms: f64,
    pub load_factor: f64,
    pub precision: u8,
    pub weights: SelectWeights,
}

impl Default for AmTuning {
    fn default() -> Self {
        AmTuning {
            poll_ms: 1000.0,
            user_ttl_ms: 30_000.0,
            idle_ttl_ms: 60_000.0,
            load_factor: 0.8,
            precision: DEFAULT_PRECISION,
            weights: SelectWeights::default(),
        }
    }
}

/// Which network carries the run. Emulated runs use virtual time; TCP runs
/// use loopback sockets in real time with the matrix delays injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Emulated,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown transport {s}"))
    }
}

/// Selection policy variant. Only client-side selection and scheduling
/// filters change between variants; the workload is identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Armada,
    Geo,
    Dedicated,
    Cloud,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Armada => "armada",
            Baseline::Geo => "geo",
            Baseline::Dedicated => "dedicated",
            Baseline::Cloud => "cloud",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown baseline {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<Baseline>,
    /// Inline latency matrix in the matrix file layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub churn: Option<ChurnScript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub churn_file: Option<PathBuf>,
    pub nodes: Vec<NodeSeed>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cargos: Vec<CargoSeed>,
    pub service: ServiceSpec,
    #[serde(default)]
    pub clients: Vec<ClientSeed>,
    #[serde(default)]
    pub client: ClientTuning,
    #[serde(default)]
    pub spinner: SpinnerConfig,
    #[serde(default)]
    pub am: AmTuning,
    #[serde(default)]
    pub storage: ManagerConfig,
    #[serde(default = "ScenarioConfig::default_setup_timeout")]
    pub setup_timeout_ms: f64,
}

/// Inputs resolved from files or inline values.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub matrix: LatencyMatrix,
    pub churn: ChurnScript,
}

impl ScenarioConfig {
    fn default_setup_timeout() -> f64 {
        60_000.0
    }

    /// Parses a config file; relative file references resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut cfg.latency_file, &mut cfg.churn_file].into_iter().flatten() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn variants(&self) -> Vec<Baseline> {
        if self.baselines.is_empty() {
            vec![Baseline::Armada]
        } else {
            self.baselines.clone()
        }
    }

    pub fn cloud_node(&self) -> Option<&NodeSeed> {
        self.nodes.iter().find(|n| n.cloud)
    }

    /// Checks the config and loads referenced files.
    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        let bad = |m: String| ScenarioError::Config(m);
        if !(self.duration_ms >= 0.0) {
            return Err(bad("duration_ms must be >= 0".into()));
        }
        let mut ids = BTreeSet::new();
        for id in self.nodes.iter().map(|n| &n.node_id).chain(self.cargos.iter().map(|c| &c.node_id)) {
            if CONTROL_IDS.contains(&id.as_str()) {
                return Err(bad(format!("node id {id} is reserved")));
            }
            if !ids.insert(id.clone()) {
                return Err(bad(format!("duplicate node id {id}")));
            }
        }
        for n in &self.nodes {
            GeoPoint::new(n.lat, n.lon).map_err(|e| bad(format!("node {}: {e}", n.node_id)))?;
            if !(n.cpu > 0.0 && n.mem > 0.0) {
                return Err(bad(format!("node {}: capacity must be positive", n.node_id)));
            }
            if n.processing_ms.is_some_and(|p| !(p >= 0.0)) || n.speed_factor.is_some_and(|s| !(s >= 0.0)) {
                return Err(bad(format!("node {}: processing must be >= 0", n.node_id)));
            }
        }
        for c in &self.cargos {
            GeoPoint::new(c.lat, c.lon).map_err(|e| bad(format!("cargo {}: {e}", c.node_id)))?;
        }
        let mut users = BTreeSet::new();
        for c in &self.clients {
            GeoPoint::new(c.lat, c.lon).map_err(|e| bad(format!("client {}: {e}", c.user_id)))?;
            if !(c.fps > 0.0) {
                return Err(bad(format!("client {}: fps must be positive", c.user_id)));
            }
            if !users.insert(c.user_id.clone()) || ids.contains(&c.user_id) {
                return Err(bad(format!("duplicate id {}", c.user_id)));
            }
        }
        if self.nodes.iter().filter(|n| n.cloud).count() > 1 {
            return Err(bad("at most one cloud node".into()));
        }
        for b in self.variants() {
            if b == Baseline::Cloud && self.cloud_node().is_none() {
                return Err(bad("the cloud baseline needs a node with \"cloud\": true".into()));
            }
            if b == Baseline::Dedicated && !self.nodes.iter().any(|n| n.dedicated && !n.cloud) {
                return Err(bad("the dedicated baseline needs at least one dedicated node".into()));
            }
        }
        if self.client.cloud_standby && self.cloud_node().is_none() {
            return Err(bad("cloud_standby needs a cloud node".into()));
        }
        self.service.validate().map_err(|e| bad(format!("service: {e}")))?;
        let matrix = match (&self.latency, &self.latency_file) {
            (Some(_), Some(_)) => return Err(bad("give latency or latency_file, not both".into())),
            (Some(v), None) => LatencyMatrix::from_json(&v.to_string()).map_err(|e| bad(e.to_string()))?,
            (None, Some(p)) => LatencyMatrix::load(p).map_err(|e| bad(e.to_string()))?,
            (None, None) => LatencyMatrix::default(),
        };
        let churn = match (&self.churn, &self.churn_file) {
            (Some(_), Some(_)) => return Err(bad("give churn or churn_file, not both".into())),
            (Some(c), None) => c.clone(),
            (None, Some(p)) => ChurnScript::load(p).map_err(|e| bad(e.to_string()))?,
            (None, None) => ChurnScript::default(),
        };
        let alive: BTreeSet<String> = self
            .nodes
            .iter()
            .filter(|n| n.up)
            .map(|n| n.node_id.clone())
            .chain(self.cargos.iter().filter(|c| c.up).map(|c| c.node_id.clone()))
            .collect();
        churn.validate(&ids, &alive).map_err(|e| bad(e.to_string()))?;
        Ok(Resolved { matrix, churn })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub requests: usize,
    pub ok: usize,
    pub failover: usize,
    pub errors: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl Stats {
    /// Latency statistics over served requests; p95 by nearest rank.
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a RequestLog>) -> Stats {
        let mut s = Stats::default();
        let mut lat = Vec::new();
        for r in rows {
            s.requests += 1;
            match r.outcome {
                Outcome::Ok => s.ok += 1,
                Outcome::Failover => s.failover += 1,
                Outcome::Error => s.errors += 1,
            }
            if r.outcome != Outcome::Error {
                lat.push(r.e2e_ms);
            }
        }
        if lat.is_empty() {
            return s;
        }
        lat.sort_by(f64::total_cmp);
        let n = lat.len();
        s.mean_ms = lat.iter().sum::<f64>() / n as f64;
        s.median_ms = if n % 2 == 1 { lat[n / 2] } else { (lat[n / 2 - 1] + lat[n / 2]) / 2.0 };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        s.p95_ms = lat[rank - 1];
        s
    }
}

/// Node id part of a logged endpoint (`node@address` or bare `node`).
pub fn node_of(endpoint: &str) -> &str {
    endpoint.split('@').next().unwrap_or(endpoint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub user_id: String,
    pub rows: Vec<RequestLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_active: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ClientResult {
    pub fn stats(&self) -> Stats {
        Stats::of(&self.rows)
    }

    /// Serving node of each request, in order.
    pub fn served_by(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.outcome != Outcome::Error)
            .map(|r| node_of(&r.endpoint))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub baseline: Baseline,
    pub seed: u64,
    pub clients: BTreeMap<String, ClientResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceSummary>,
    pub churn: Vec<ChurnEvent>,
}

impl RunResult {
    pub fn overall(&self) -> Stats {
        Stats::of(self.clients.values().flat_map(|c| c.rows.iter()))
    }

    /// Requests issued at or after `from_ms` of scenario time.
    pub fn overall_since(&self, from_ms: f64) -> Stats {
        Stats::of(self.clients.values().flat_map(|c| c.rows.iter()).filter(|r| r.ts_ms >= from_ms))
    }
}

/// Handles to a booted deployment, for scenarios driven from code.
pub struct Deployment {
    /// Set for emulated runs; exposes partitions and tracing.
    pub emulated: Option<Arc<EmulatedNet>>,
    pub shared: SharedTransport,
    pub clock: Clock,
    pub spinner: Arc<Spinner>,
    pub manager: Arc<CargoManager>,
    pub am: Arc<AppManager>,
    pub captains: BTreeMap<String, Arc<Captain>>,
    pub cargos: BTreeMap<String, Arc<Cargo>>,
    pub beacon: Endpoint,
    /// Endpoint of the cloud node's task, once deployed.
    pub cloud: Option<Endpoint>,
}

async fn bind_control(shared: &SharedTransport, id: &str, h: Arc<dyn crate::netharness::Handler>) -> Result<Endpoint, ScenarioError> {
    shared
        .bind(Endpoint::node(id), h)
        .await
        .map_err(|e| ScenarioError::Setup(format!("bind {id}: {e}")))
}

impl Deployment {
    /// Starts the control plane, storage and compute nodes. Nodes that are
    /// not `up` stay down until a churn JOIN.
    /// `beacon_address` pins the Beacon's listen address on TCP.
    pub async fn boot(
        cfg: &ScenarioConfig,
        res: &Resolved,
        transport: TransportKind,
        beacon_address: Option<&str>,
    ) -> Result<Deployment, ScenarioError> {
        let (emulated, shared): (_, SharedTransport) = match transport {
            TransportKind::Emulated => {
                let net = EmulatedNet::new(res.matrix.clone(), cfg.seed);
                (Some(net.clone()), net)
            }
            TransportKind::Tcp => (None, TcpNet::with_latency(res.matrix.clone(), cfg.seed)),
        };
        let clock = Clock::start();
        for id in cfg.nodes.iter().filter(|n| !n.up).map(|n| &n.node_id) {
            shared.liveness().mark_down(id);
        }
        for id in cfg.cargos.iter().filter(|c| !c.up).map(|c| &c.node_id) {
            shared.liveness().mark_down(id);
        }

        let spinner = Spinner::new(SPINNER, shared.clone(), clock, cfg.spinner.clone());
        let spinner_ep = bind_control(&shared, SPINNER, spinner.clone()).await?;
        spinner.spawn_monitor();
        let manager = CargoManager::new(CARGO_MGR, shared.clone(), clock, cfg.storage);
        let mgr_ep = bind_control(&shared, CARGO_MGR, manager.clone()).await?;
        manager.spawn_monitor();
        let mut am_cfg = AmConfig::new(spinner_ep.clone(), mgr_ep.clone());
        am_cfg.poll_ms = cfg.am.poll_ms;
        am_cfg.user_ttl_ms = cfg.am.user_ttl_ms;
        am_cfg.idle_ttl_ms = cfg.am.idle_ttl_ms;
        am_cfg.load_factor = cfg.am.load_factor;
        am_cfg.precision = cfg.am.precision;
        am_cfg.weights = cfg.am.weights;
        let am = AppManager::new(AM, shared.clone(), clock, am_cfg);
        let am_ep = bind_control(&shared, AM, am.clone()).await?;
        am.spawn_poller();
        let beacon = Beacon::new(BEACON, shared.clone(), am_ep, spinner_ep, mgr_ep);
        let beacon_ep = shared
            .bind(
                Endpoint::new(BEACON, beacon_address.unwrap_or(BEACON)),
                Arc::new(beacon),
            )
            .await
            .map_err(|e| ScenarioError::Setup(format!("bind {BEACON}: {e}")))?;

        let mut cargos = BTreeMap::new();
        for c in &cfg.cargos {
            let loc = GeoPoint::new(c.lat, c.lon).map_err(|e| ScenarioError::Config(e.to_string()))?;
            let desc = CargoDescriptor::new(&c.node_id, loc, c.capacity_mb);
            let cargo = Cargo::new(shared.clone(), CargoConfig::new(desc, beacon_ep.clone()));
            cargo
                .start()
                .await
                .map_err(|e| ScenarioError::Setup(format!("cargo {}: {e}", c.node_id)))?;
            cargos.insert(c.node_id.clone(), cargo);
        }
        let base_ms = cfg.service.workload.processing_ms;
        let mut captains = BTreeMap::new();
        for n in &cfg.nodes {
            let loc = GeoPoint::new(n.lat, n.lon).map_err(|e| ScenarioError::Config(e.to_string()))?;
            let desc = NodeDescriptor::new(&n.node_id, loc, n.net_type, n.cpu, n.mem)
                .dedicated(n.dedicated)
                .with_layers(n.layers.iter().cloned());
            let mut c = CaptainConfig::new(desc, beacon_ep.clone());
            c.speed_factor = match (n.processing_ms, n.speed_factor) {
                (Some(p), _) if base_ms > 0.0 => p / base_ms,
                (_, Some(s)) => s,
                _ => 1.0,
            };
            c.register = !n.cloud;
            let captain = Captain::new(shared.clone(), clock, c);
            captain
                .start()
                .await
                .map_err(|e| ScenarioError::Setup(format!("node {}: {e}", n.node_id)))?;
            captains.insert(n.node_id.clone(), captain);
        }
        Ok(Deployment {
            emulated,
            shared,
            clock,
            spinner,
            manager,
            am,
            captains,
            cargos,
            beacon: beacon_ep,
            cloud: None,
        })
    }

    /// Waits until every initially-up node and cargo is registered.
    pub async fn await_registration(&self, cfg: &ScenarioConfig, timeout_ms: f64) -> Result<(), ScenarioError> {
        let want_nodes = cfg.nodes.iter().filter(|n| n.up && !n.cloud).count();
        let want_cargos = cfg.cargos.iter().filter(|c| c.up).count();
        let deadline = Instant::now() + ms_duration(timeout_ms);
        loop {
            let nodes = self.spinner.with_state(|s| s.nodes().len());
            let cargos = self.manager.with_state(|s| s.cargos().len());
            if nodes >= want_nodes && cargos >= want_cargos {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(ScenarioError::Setup(format!(
                    "registration incomplete: {nodes}/{want_nodes} nodes, {cargos}/{want_cargos} cargos"
                )));
            }
            tokio::time::sleep(Duration::from_millis(200)).await;
        }
    }

    pub async fn deploy(&self, spec: &ServiceSpec) -> Result<Reply, ScenarioError> {
        let msg = AmRequest::DeployService(spec.clone());
        let reply: Reply = rpc(
            self.shared.as_ref(),
            OPERATOR,
            &self.beacon,
            &envelope(Target::Am, &msg),
            Some(Duration::from_secs(120)),
        )
        .await
        .map_err(|e| ScenarioError::Setup(format!("deploy: {e}")))?;
        if !reply.is_ok() {
            return Err(ScenarioError::Setup(format!("deploy rejected: {}", reply.detail)));
        }
        Ok(reply)
    }

    pub fn summary(&self, service_id: &str) -> Option<ServiceSummary> {
        self.am.with_state(|s| s.summary(service_id))
    }

    /// Waits until the AM sees every live task of the service RUNNING.
    pub async fn await_running(&self, service_id: &str, timeout_ms: f64) -> Result<ServiceSummary, ScenarioError> {
        let deadline = Instant::now() + ms_duration(timeout_ms);
        loop {
            if let Some(s) = self.summary(service_id) {
                let live: Vec<&TaskRecord> = s.tasks.iter().filter(|t| !t.state.is_terminal()).collect();
                if !live.is_empty() && live.iter().all(|t| t.state == TaskState::Running) {
                    return Ok(s);
                }
            }
            if Instant::now() >= deadline {
                return Err(ScenarioError::Setup(format!("{service_id} did not reach RUNNING")));
            }
            tokio::time::sleep(Duration::from_millis(200)).await;
        }
    }

    /// Deploys the service straight onto the standalone cloud node.
    pub async fn deploy_cloud(&mut self, node: &NodeSeed, spec: &ServiceSpec, timeout_ms: f64) -> Result<Endpoint, ScenarioError> {
        let captain = self.captains.get(&node.node_id).expect("cloud captain booted").clone();
        let loc = GeoPoint::new(node.lat, node.lon).map_err(|e| ScenarioError::Config(e.to_string()))?;
        let msg = CaptainRequest::TaskDeploy {
            task_id: format!("{}-cloud", spec.service_id),
            request: spec.task_request(loc, Vec::new()),
        };
        let r: Reply = rpc(self.shared.as_ref(), OPERATOR, &captain.control_endpoint(), &msg, None)
            .await
            .map_err(|e| ScenarioError::Setup(format!("cloud deploy: {e}")))?;
        if !r.is_ok() {
            return Err(ScenarioError::Setup(format!("cloud deploy: {}", r.detail)));
        }
        let deadline = Instant::now() + ms_duration(timeout_ms);
        loop {
            let snap = captain.snapshot();
            if let Some(ep) = snap.tasks.iter().find(|t| t.state == TaskState::Running).and_then(|t| t.endpoint.clone()) {
                self.cloud = Some(ep.clone());
                return Ok(ep);
            }
            if Instant::now() >= deadline {
                return Err(ScenarioError::Setup("cloud task did not start".into()));
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }

    pub fn client(&self, seed: &ClientSeed, cfg: &ScenarioConfig, baseline: Baseline, clock: Clock) -> Arc<Client> {
        let loc = GeoPoint::new(seed.lat, seed.lon).expect("validated");
        let mut c = ClientConfig::new(&seed.user_id, &cfg.service.service_id, loc, self.beacon.clone());
        c.net_type = seed.net_type;
        c.probe_count = cfg.client.probe_count;
        c.reselect_ms = cfg.client.reselect_ms;
        c.switch_margin = cfg.client.switch_margin;
        c.requery = cfg.client.requery;
        c.request_timeout = ms_duration(cfg.client.request_timeout_ms);
        c.mode = match baseline {
            Baseline::Armada | Baseline::Dedicated => SelectMode::Probe,
            Baseline::Geo => SelectMode::GeoNearest,
            Baseline::Cloud => SelectMode::Fixed(self.cloud.clone().expect("cloud deployed")),
        };
        if cfg.client.cloud_standby {
            c.cloud = self.cloud.clone();
        }
        Client::new(self.shared.clone(), clock, c)
    }
}

/// Drives one client from its start time until it stops or the run ends.
async fn drive(client: Arc<Client>, seed: ClientSeed, t0: Instant, end: Instant) -> ClientResult {
    let start = t0 + ms_duration(seed.start_at_ms);
    let stop = seed.stop_at_ms.map_or(end, |s| (t0 + ms_duration(s)).min(end));
    tokio::time::sleep_until(start).await;
    let mut error = None;
    let connected = loop {
        if Instant::now() >= stop {
            break false;
        }
        match client.connect().await {
            Ok(_) => break true,
            Err(e) => {
                error = Some(e.to_string());
                tokio::time::sleep(Duration::from_millis(1000)).await;
            }
        }
    };
    if connected {
        error = None;
        client.start_reselection();
        let period = ms_duration(1000.0 / seed.fps);
        let mut sent = 0;
        while Instant::now() < stop && seed.frames.map_or(true, |f| sent < f) {
            let at = Instant::now();
            let _ = client.offload(crate::captain::Op::Infer, Value::Null).await;
            sent += 1;
            tokio::time::sleep_until(at + period).await;
        }
        client.stop_reselection();
    }
    ClientResult {
        user_id: seed.user_id.clone(),
        rows: client.requests(),
        final_active: client.connection_set().map(|s| s.active.endpoint.node_id.clone()),
        error,
    }
}

/// Runs one variant inside the current (virtual-time) runtime.
pub async fn run_async(cfg: &ScenarioConfig, baseline: Baseline, transport: TransportKind) -> Result<RunResult, ScenarioError> {
    let res = cfg.resolve()?;
    let mut spec = cfg.service.clone();
    if baseline == Baseline::Dedicated {
        spec.sched_policy = Some(DEDICATED_POLICY.to_string());
    }
    let mut dep = Deployment::boot(cfg, &res, transport, None).await?;
    if baseline == Baseline::Dedicated {
        let policy = CustomPolicy {
            name: DEDICATED_POLICY.to_string(),
            filters: vec![Predicate::new("dedicated", Comparator::Eq, json!(true))],
            sort: Vec::new(),
        };
        dep.spinner
            .with_state(|s| s.register_policy(policy))
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
    }
    dep.await_registration(cfg, cfg.setup_timeout_ms).await?;
    dep.deploy(&spec).await?;
    dep.await_running(&spec.service_id, cfg.setup_timeout_ms).await?;
    if let Some(cloud) = cfg.cloud_node() {
        if baseline == Baseline::Cloud || cfg.client.cloud_standby {
            dep.deploy_cloud(cloud, &spec, cfg.setup_timeout_ms).await?;
        }
    }

    let t0 = Instant::now();
    let clock = Clock::start();
    let end = t0 + ms_duration(cfg.duration_ms);
    info!(baseline = baseline.name(), setup_ms = dep.clock.now_ms(), "scenario started");
    let live = dep.shared.liveness().clone();
    let script = res.churn.clone();
    let churn = tokio::spawn(async move { apply_churn(&script, &live, t0, |_| {}).await });
    let drivers: Vec<_> = cfg
        .clients
        .iter()
        .map(|seed| {
            let client = dep.client(seed, cfg, baseline, clock);
            tokio::spawn(drive(client, seed.clone(), t0, end))
        })
        .collect();
    let mut clients = BTreeMap::new();
    for d in drivers {
        let r = d.await.map_err(|e| ScenarioError::Setup(format!("client task: {e}")))?;
        clients.insert(r.user_id.clone(), r);
    }
    tokio::time::sleep_until(end).await;
    churn.abort();
    let applied = res
        .churn
        .events
        .iter()
        .filter(|e| (e.at_ms as f64) <= cfg.duration_ms)
        .cloned()
        .collect();
    Ok(RunResult {
        baseline,
        seed: cfg.seed,
        clients,
        service: dep.summary(&spec.service_id),
        churn: applied,
    })
}

/// Runs one emulated variant on a fresh virtual-time runtime.
pub fn run(cfg: &ScenarioConfig, baseline: Baseline) -> Result<RunResult, ScenarioError> {
    run_on(cfg, baseline, TransportKind::Emulated)
}

/// Runs one variant on a fresh runtime suited to the transport.
pub fn run_on(cfg: &ScenarioConfig, baseline: Baseline, transport: TransportKind) -> Result<RunResult, ScenarioError> {
    let rt = match transport {
        TransportKind::Emulated => crate::netharness::virtual_runtime(),
        TransportKind::Tcp => crate::netharness::real_runtime(),
    };
    rt.block_on(run_async(cfg, baseline, transport))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub overall: Stats,
    pub clients: BTreeMap<String, Stats>,
    pub final_active: BTreeMap<String, Option<String>>,
    pub tasks: usize,
    pub scale_events: usize,
}

/// Writes `<out>/<variant>/client_<user>.csv` per client, a combined
/// `<out>/<variant>/requests.csv`, the final `<out>/<variant>/service.json`
/// and an aggregate `<out>/summary.json`. Returns the paths written.
pub fn write_outputs(cfg: &ScenarioConfig, results: &[RunResult], out: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    let mut written = Vec::new();
    let mut variants = BTreeMap::new();
    for r in results {
        let dir = out.join(r.baseline.name());
        std::fs::create_dir_all(&dir)?;
        let mut all = format!("user_id,{CSV_HEADER}\n");
        for (user, c) in &r.clients {
            let csv = to_csv(&c.rows);
            for line in csv.lines().skip(1) {
                all.push_str(&format!("{user},{line}\n"));
            }
            let path = dir.join(format!("client_{user}.csv"));
            std::fs::write(&path, csv)?;
            written.push(path);
        }
        let path = dir.join("requests.csv");
        std::fs::write(&path, all)?;
        written.push(path);
        if let Some(s) = &r.service {
            let path = dir.join("service.json");
            std::fs::write(&path, serde_json::to_string_pretty(s).expect("summary serializes") + "\n")?;
            written.push(path);
        }
        let (tasks, scale_events) = r
            .service
            .as_ref()
            .map_or((0, 0), |s| (s.tasks.iter().filter(|t| !t.state.is_terminal()).count(), s.scale_events.len()));
        variants.insert(
            r.baseline.name().to_string(),
            VariantSummary {
                overall: r.overall(),
                clients: r.clients.iter().map(|(u, c)| (u.clone(), c.stats())).collect(),
                final_active: r.clients.iter().map(|(u, c)| (u.clone(), c.final_active.clone())).collect(),
                tasks,
                scale_events,
            },
        );
    }
    std::fs::create_dir_all(out)?;
    let summary = json!({
        "seed": cfg.seed,
        "duration_ms": cfg.duration_ms,
        "variants": variants,
    });
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    written.push(path);
    Ok(written)
}
