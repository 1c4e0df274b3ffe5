//! Application-client library: probes the candidate list, offloads to the
//! fastest candidate, keeps the rest as warm standbys and reselects in the
//! background.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tracing::{debug, info, warn};

use crate::captain::{Op, WorkReply, WorkRequest, NOT_RUNNING};
use crate::control_plane::{AmRequest, Candidate, CandidateList, Rank, UserQuery};
use crate::geo::GeoPoint;
use crate::netharness::{ms_duration, Clock, Endpoint, SharedTransport};
use crate::proto::{via_beacon, CallError, Status, Target};
use crate::scheduler::NetType;

/// How the active endpoint is picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Candidate list plus end-to-end probing.
    Probe,
    /// First candidate by distance, no probing.
    GeoNearest,
    /// A single fixed endpoint, e.g. a cloud server.
    Fixed(Endpoint),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub user_id: String,
    pub service_id: String,
    pub location: GeoPoint,
    pub net_type: Option<NetType>,
    pub beacon: Endpoint,
    pub mode: SelectMode,
    pub probe_count: usize,
    pub reselect_ms: f64,
    /// Relative improvement a challenger needs before the active switches.
    pub switch_margin: f64,
    /// Re-run the candidate query on each reselection; otherwise only
    /// re-probe the current set.
    pub requery: bool,
    pub request_timeout: Duration,
    pub control_timeout: Duration,
    /// Last-resort standby after every edge candidate.
    pub cloud: Option<Endpoint>,
}

impl ClientConfig {
    pub fn new(user_id: &str, service_id: &str, location: GeoPoint, beacon: Endpoint) -> Self {
        ClientConfig {
            user_id: user_id.to_string(),
            service_id: service_id.to_string(),
            location,
            net_type: None,
            beacon,
            mode: SelectMode::Probe,
            probe_count: 5,
            reselect_ms: 10_000.0,
            switch_margin: 0.1,
            requery: true,
            request_timeout: Duration::from_millis(1000),
            control_timeout: Duration::from_millis(2000),
            cloud: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("candidate query failed: {0}")]
    Query(#[from] CallError),
    #[error("no candidate reachable")]
    NoCandidates,
    #[error("not connected")]
    NotConnected,
    #[error("all connections failed: {0}")]
    Exhausted(String),
    #[error("server error: {0}")]
    Server(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task_id: String,
    pub endpoint: Endpoint,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub measured_at_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conn {
    pub task_id: String,
    pub endpoint: Endpoint,
    /// Median probe latency when the epoch was committed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSet {
    pub epoch: u64,
    pub active: Conn,
    pub standbys: Vec<Conn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    /// Served, but only after switching away from a failed connection.
    Failover,
    Error,
}

impl Outcome {
    fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::Failover => "failover",
            Outcome::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub ts_ms: f64,
    pub epoch: u64,
    pub endpoint: String,
    pub e2e_ms: f64,
    pub server_ms: f64,
    pub outcome: Outcome,
}

pub const CSV_HEADER: &str = "ts_ms,epoch,endpoint,e2e_ms,server_ms,outcome";

/// Renders a request log in the metrics CSV layout.
pub fn to_csv(rows: &[RequestLog]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{:.3},{},{},{:.3},{:.3},{}",
            r.ts_ms,
            r.epoch,
            r.endpoint,
            r.e2e_ms,
            r.server_ms,
            r.outcome.as_str()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Served {
    pub reply: WorkReply,
    pub e2e_ms: f64,
    pub endpoint: Endpoint,
    pub failovers: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Index of the smallest median; ties go to the earlier candidate.
pub fn argmin(results: &[ProbeResult]) -> Option<usize> {
    (0..results.len()).min_by(|&a, &b| results[a].median_ms.total_cmp(&results[b].median_ms).then(a.cmp(&b)))
}

enum Attempt {
    Served(WorkReply),
    /// Endpoint gone; try another connection.
    Dead(String),
    /// The server answered with an application error.
    Refused(WorkReply),
}

pub struct Client {
    net: SharedTransport,
    clock: Clock,
    cfg: ClientConfig,
    set: RwLock<Option<Arc<ConnectionSet>>>,
    epoch: Mutex<u64>,
    log: Mutex<Vec<RequestLog>>,
    probes: Mutex<Vec<ProbeResult>>,
    reselector: Mutex<Option<JoinHandle<()>>>,
    reconnect: tokio::sync::Mutex<()>,
}

impl Client {
    pub fn new(net: SharedTransport, clock: Clock, cfg: ClientConfig) -> Arc<Self> {
        Arc::new(Client {
            net,
            clock,
            cfg,
            set: RwLock::new(None),
            epoch: Mutex::new(0),
            log: Mutex::new(Vec::new()),
            probes: Mutex::new(Vec::new()),
            reselector: Mutex::new(None),
            reconnect: tokio::sync::Mutex::new(()),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn connection_set(&self) -> Option<Arc<ConnectionSet>> {
        self.set.read().clone()
    }

    pub fn requests(&self) -> Vec<RequestLog> {
        self.log.lock().clone()
    }

    pub fn csv(&self) -> String {
        to_csv(&self.log.lock())
    }

    /// Probe results of the most recent probing round.
    pub fn last_probes(&self) -> Vec<ProbeResult> {
        self.probes.lock().clone()
    }

    async fn query(&self, rank: Rank) -> Result<CandidateList, ClientError> {
        let msg = AmRequest::ServiceSelect {
            service_id: self.cfg.service_id.clone(),
            query: UserQuery {
                user_id: self.cfg.user_id.clone(),
                loc: self.cfg.location,
                net_type: self.cfg.net_type,
            },
            rank,
        };
        let list = via_beacon(
            self.net.as_ref(),
            &self.cfg.user_id,
            &self.cfg.beacon,
            Target::Am,
            &msg,
            Some(self.cfg.control_timeout),
        )
        .await?;
        Ok(list)
    }

    async fn report(&self, task_id: &str) {
        let msg = AmRequest::ReportSelection {
            service_id: self.cfg.service_id.clone(),
            user_id: self.cfg.user_id.clone(),
            task_id: task_id.to_string(),
        };
        let r: Result<Value, _> = via_beacon(
            self.net.as_ref(),
            &self.cfg.user_id,
            &self.cfg.beacon,
            Target::Am,
            &msg,
            Some(self.cfg.control_timeout),
        )
        .await;
        if let Err(e) = r {
            debug!(user = %self.cfg.user_id, error = %e, "selection report failed");
        }
    }

    async fn send(&self, ep: &Endpoint, req: &WorkRequest) -> Attempt {
        let body = serde_json::to_vec(req).expect("request serializes");
        match self.net.call_with_timeout(&self.cfg.user_id, ep, body, self.cfg.request_timeout).await {
            Ok(bytes) => match serde_json::from_slice::<WorkReply>(&bytes) {
                Ok(r) if r.status == Status::Ok => Attempt::Served(r),
                Ok(r) if r.detail == NOT_RUNNING => Attempt::Dead(r.detail),
                Ok(r) => Attempt::Refused(r),
                Err(e) => Attempt::Dead(format!("bad reply: {e}")),
            },
            Err(e) => Attempt::Dead(e.to_string()),
        }
    }

    /// `probe_count` sequential no-op frames through the full request path.
    pub async fn probe(&self, task_id: &str, ep: &Endpoint) -> Option<ProbeResult> {
        let req = WorkRequest::probe(&self.cfg.service_id);
        let mut samples = Vec::with_capacity(self.cfg.probe_count);
        for _ in 0..self.cfg.probe_count.max(1) {
            let t0 = Instant::now();
            match self.send(ep, &req).await {
                Attempt::Served(_) => samples.push(t0.elapsed().as_secs_f64() * 1000.0),
                Attempt::Dead(e) | Attempt::Refused(WorkReply { detail: e, .. }) => {
                    debug!(user = %self.cfg.user_id, endpoint = %ep, error = %e, "probe failed");
                    return None;
                }
            }
        }
        Some(ProbeResult {
            task_id: task_id.to_string(),
            endpoint: ep.clone(),
            median_ms: median(samples.clone()),
            samples_ms: samples,
            measured_at_ms: self.clock.now_ms(),
        })
    }

    /// Probes every candidate concurrently; unreachable ones are dropped.
    /// Returns results sorted best first.
    async fn probe_all(&self, cands: &[Candidate]) -> Vec<ProbeResult> {
        let futs = cands.iter().map(|c| self.probe(&c.task_id, &c.endpoint));
        let found: Vec<ProbeResult> = futures::future::join_all(futs).await.into_iter().flatten().collect();
        let mut order: Vec<usize> = (0..found.len()).collect();
        order.sort_by(|&a, &b| found[a].median_ms.total_cmp(&found[b].median_ms).then(a.cmp(&b)));
        let sorted: Vec<ProbeResult> = order.into_iter().map(|i| found[i].clone()).collect();
        *self.probes.lock() = sorted.clone();
        sorted
    }

    fn commit(&self, active: Conn, standbys: Vec<Conn>) -> Arc<ConnectionSet> {
        let mut epoch = self.epoch.lock();
        *epoch += 1;
        let set = Arc::new(ConnectionSet {
            epoch: *epoch,
            active,
            standbys,
        });
        *self.set.write() = Some(set.clone());
        set
    }

    fn conn(p: &ProbeResult) -> Conn {
        Conn {
            task_id: p.task_id.clone(),
            endpoint: p.endpoint.clone(),
            median_ms: Some(p.median_ms),
        }
    }

    /// Step 1 (candidate query) and step 2 (probing), then commits a new epoch.
    pub async fn connect(&self) -> Result<Arc<ConnectionSet>, ClientError> {
        let set = match &self.cfg.mode {
            SelectMode::Fixed(ep) => self.commit(
                Conn {
                    task_id: ep.node_id.clone(),
                    endpoint: ep.clone(),
                    median_ms: None,
                },
                Vec::new(),
            ),
            SelectMode::GeoNearest => {
                let list = self.query(Rank::Distance).await?;
                let mut conns = list.entries.iter().map(|c| Conn {
                    task_id: c.task_id.clone(),
                    endpoint: c.endpoint.clone(),
                    median_ms: None,
                });
                let active = conns.next().ok_or(ClientError::NoCandidates)?;
                self.commit(active, conns.collect())
            }
            SelectMode::Probe => {
                let list = self.query(Rank::Score).await?;
                let probed = self.probe_all(&list.entries).await;
                let (first, rest) = probed.split_first().ok_or(ClientError::NoCandidates)?;
                self.commit(Self::conn(first), rest.iter().map(Self::conn).collect())
            }
        };
        info!(user = %self.cfg.user_id, active = %set.active.endpoint, epoch = set.epoch, "connected");
        if !matches!(self.cfg.mode, SelectMode::Fixed(_)) {
            self.report(&set.active.task_id).await;
        }
        Ok(set)
    }

    /// One background reselection round. Leaves the current epoch alone on
    /// failure; switches only past the hysteresis margin.
    pub async fn reselect_tick(&self) -> Result<Arc<ConnectionSet>, ClientError> {
        let current = self.connection_set().ok_or(ClientError::NotConnected)?;
        let set = match &self.cfg.mode {
            SelectMode::Fixed(_) => return Ok(current),
            SelectMode::GeoNearest => {
                let list = self.query(Rank::Distance).await?;
                let mut conns = list.entries.iter().map(|c| Conn {
                    task_id: c.task_id.clone(),
                    endpoint: c.endpoint.clone(),
                    median_ms: None,
                });
                let active = conns.next().ok_or(ClientError::NoCandidates)?;
                self.commit(active, conns.collect())
            }
            SelectMode::Probe => {
                let cands: Vec<Candidate> = if self.cfg.requery {
                    self.query(Rank::Score).await?.entries
                } else {
                    std::iter::once(&current.active)
                        .chain(current.standbys.iter())
                        .map(|c| Candidate {
                            task_id: c.task_id.clone(),
                            node_id: c.endpoint.node_id.clone(),
                            endpoint: c.endpoint.clone(),
                            score: 0.0,
                            distance_km: 0.0,
                        })
                        .collect()
                };
                let probed = self.probe_all(&cands).await;
                let best = probed.first().ok_or(ClientError::NoCandidates)?;
                let incumbent = probed.iter().find(|p| p.endpoint == current.active.endpoint);
                let keep = match incumbent {
                    Some(inc) => best.median_ms >= inc.median_ms * (1.0 - self.cfg.switch_margin),
                    None => false,
                };
                let chosen = if keep { incumbent.expect("checked") } else { best };
                let standbys = probed.iter().filter(|p| p.endpoint != chosen.endpoint).map(Self::conn).collect();
                let set = self.commit(Self::conn(chosen), standbys);
                if !keep {
                    info!(user = %self.cfg.user_id, from = %current.active.endpoint, to = %set.active.endpoint, "switched");
                }
                set
            }
        };
        if set.active.task_id != current.active.task_id || self.cfg.requery {
            self.report(&set.active.task_id).await;
        }
        Ok(set)
    }

    pub fn start_reselection(self: &Arc<Self>) {
        if matches!(self.cfg.mode, SelectMode::Fixed(_)) {
            return;
        }
        let me = self.clone();
        let period = ms_duration(self.cfg.reselect_ms);
        let handle = tokio::spawn(async move {
            loop {
                tokio::time::sleep(period).await;
                if let Err(e) = me.reselect_tick().await {
                    debug!(user = %me.cfg.user_id, error = %e, "reselection failed; keeping current set");
                }
            }
        });
        if let Some(old) = self.reselector.lock().replace(handle) {
            old.abort();
        }
    }

    pub fn stop_reselection(&self) {
        if let Some(h) = self.reselector.lock().take() {
            h.abort();
        }
    }

    /// Drops `dead` from the live set and promotes the next standby.
    fn demote(&self, dead: &Endpoint) {
        let mut slot = self.set.write();
        let Some(cur) = slot.clone() else { return };
        if cur.active.endpoint != *dead {
            let standbys: Vec<Conn> = cur.standbys.iter().filter(|c| c.endpoint != *dead).cloned().collect();
            if standbys.len() != cur.standbys.len() {
                *slot = Some(Arc::new(ConnectionSet {
                    standbys,
                    ..(*cur).clone()
                }));
            }
            return;
        }
        let mut rest = cur.standbys.clone();
        if rest.is_empty() {
            return;
        }
        let active = rest.remove(0);
        *slot = Some(Arc::new(ConnectionSet {
            epoch: cur.epoch,
            active,
            standbys: rest,
        }));
    }

    /// Endpoints to try in order: active, standbys, then the cloud fallback.
    fn route(&self) -> (u64, Vec<Endpoint>) {
        let set = self.connection_set();
        let mut eps: Vec<Endpoint> = match &set {
            Some(s) => std::iter::once(&s.active).chain(s.standbys.iter()).map(|c| c.endpoint.clone()).collect(),
            None => Vec::new(),
        };
        if let Some(cloud) = &self.cfg.cloud {
            if !eps.contains(cloud) {
                eps.push(cloud.clone());
            }
        }
        (set.map_or(0, |s| s.epoch), eps)
    }

    async fn try_route(&self, req: &WorkRequest, eps: &[Endpoint], failovers: &mut usize, last: &mut String) -> Option<(Endpoint, Result<WorkReply, WorkReply>)> {
        for ep in eps {
            match self.send(ep, req).await {
                Attempt::Served(r) => return Some((ep.clone(), Ok(r))),
                Attempt::Refused(r) => return Some((ep.clone(), Err(r))),
                Attempt::Dead(e) => {
                    warn!(user = %self.cfg.user_id, endpoint = %ep, error = %e, "connection failed; switching");
                    self.demote(ep);
                    *failovers += 1;
                    *last = e;
                }
            }
        }
        None
    }

    /// Sends one frame on the active connection, switching to standbys (and
    /// finally one emergency reconnect) if connections fail.
    pub async fn offload(&self, op: Op, payload: Value) -> Result<Served, ClientError> {
        let req = WorkRequest {
            service_id: self.cfg.service_id.clone(),
            op,
            payload,
        };
        let ts = self.clock.now_ms();
        let t0 = Instant::now();
        let (epoch, eps) = self.route();
        let mut failovers = 0;
        let mut last = String::from("no connection");
        let mut outcome = self.try_route(&req, &eps, &mut failovers, &mut last).await;
        if outcome.is_none() && !matches!(self.cfg.mode, SelectMode::Fixed(_)) {
            let _g = self.reconnect.lock().await;
            match self.connect().await {
                Ok(_) => {
                    let (_, eps) = self.route();
                    outcome = self.try_route(&req, &eps, &mut failovers, &mut last).await;
                }
                Err(e) => last = e.to_string(),
            }
        }
        let e2e_ms = t0.elapsed().as_secs_f64() * 1000.0;
        let epoch = self.connection_set().map_or(epoch, |s| s.epoch);
        let (endpoint, served, server_ms, result) = match outcome {
            Some((ep, Ok(reply))) => {
                let s = reply.server_ms;
                let outcome = if failovers > 0 { Outcome::Failover } else { Outcome::Ok };
                (ep.to_string(), outcome, s, Ok((ep, reply)))
            }
            Some((ep, Err(reply))) => (ep.to_string(), Outcome::Error, reply.server_ms, Err(ClientError::Server(reply.detail))),
            None => (String::from("-"), Outcome::Error, 0.0, Err(ClientError::Exhausted(last))),
        };
        self.log.lock().push(RequestLog {
            ts_ms: ts,
            epoch,
            endpoint,
            e2e_ms,
            server_ms,
            outcome: served,
        });
        let (endpoint, reply) = result?;
        Ok(Served {
            reply,
            e2e_ms,
            endpoint,
            failovers,
        })
    }

    /// Streams `frames` inference frames at `fps`; a frame that takes longer
    /// than the period delays the next one.
    pub async fn stream(&self, frames: usize, fps: f64) -> usize {
        let period = ms_duration(1000.0 / fps.max(1e-3));
        let mut ok = 0;
        for _ in 0..frames {
            let start = Instant::now();
            if self.offload(Op::Infer, Value::Null).await.is_ok() {
                ok += 1;
            }
            tokio::time::sleep_until(start + period).await;
        }
        ok
    }
}
