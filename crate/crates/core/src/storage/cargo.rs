use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde_json::Value;
use tracing::{debug, info, warn};

use super::store::{self, check_kv, Store};
use super::{
    CargoDescriptor, CargoPeer, CargoRequest, CargoStatus, Consistency, ManagerRequest, MatchReply, ReadReply, Record,
    ReplicaSet, ReplicaStatus, StorageError, WriteAck,
};
use crate::netharness::{ms_duration, Endpoint, Handler, NetError, NodeStatus, SharedTransport};
use crate::proto::{decode_request, request, via_beacon, CallError, Reply, Target};
use crate::scheduler::REREGISTER;

#[derive(Debug, Clone)]
pub struct CargoConfig {
    pub desc: CargoDescriptor,
    pub beacon: Endpoint,
    pub heartbeat_ms: f64,
    /// Per-hop timeout for cascade forwarding.
    pub hop_timeout: Duration,
    pub retry_ms: f64,
    pub max_retries: u32,
    /// Append-only log directory; in-memory only when unset.
    pub persist_dir: Option<PathBuf>,
}

impl CargoConfig {
    pub fn new(desc: CargoDescriptor, beacon: Endpoint) -> Self {
        CargoConfig {
            desc,
            beacon,
            heartbeat_ms: 2000.0,
            hop_timeout: Duration::from_millis(2000),
            retry_ms: 250.0,
            max_retries: 240,
            persist_dir: None,
        }
    }
}

struct Replica {
    set: ReplicaSet,
    store: Store,
}

/// A storage node. Replica state survives emulated crashes (it stands in
/// for the on-disk copy); a rejoin triggers anti-entropy.
pub struct Cargo {
    id: String,
    net: SharedTransport,
    cfg: CargoConfig,
    endpoint: Mutex<Endpoint>,
    replicas: Mutex<BTreeMap<String, Replica>>,
    me: Weak<Cargo>,
}

fn chain_after(chain: &[CargoPeer], id: &str) -> Vec<CargoPeer> {
    match chain.iter().position(|p| p.node_id == id) {
        Some(i) => chain[i + 1..].iter().chain(&chain[..i]).cloned().collect(),
        None => chain.to_vec(),
    }
}

/// Live-chain predecessors of `id`, nearest first.
fn predecessors(chain: &[CargoPeer], id: &str) -> Vec<CargoPeer> {
    let mut v = chain_after(chain, id);
    v.reverse();
    v
}

impl Cargo {
    pub fn new(net: SharedTransport, cfg: CargoConfig) -> Arc<Self> {
        Arc::new_cyclic(|me| Cargo {
            id: cfg.desc.node_id.clone(),
            endpoint: Mutex::new(Endpoint::node(&cfg.desc.node_id)),
            net,
            cfg,
            replicas: Mutex::new(BTreeMap::new()),
            me: me.clone(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn endpoint(&self) -> Endpoint {
        self.endpoint.lock().clone()
    }

    /// Binds, registers with the manager and starts background loops.
    pub async fn start(self: &Arc<Self>) -> Result<Endpoint, NetError> {
        let want = self.cfg.desc.endpoint.clone().unwrap_or_else(|| Endpoint::node(&self.id));
        let ep = self.net.bind(want, self.clone()).await?;
        *self.endpoint.lock() = ep.clone();
        if let Err(e) = self.join().await {
            debug!(cargo = %self.id, error = %e, "initial join failed; heartbeat will retry");
        }
        self.spawn_heartbeat();
        self.spawn_rejoin_watch();
        Ok(ep)
    }

    fn descriptor(&self) -> CargoDescriptor {
        let mut d = self.cfg.desc.clone();
        d.endpoint = Some(self.endpoint());
        d.used_mb = self.used_mb();
        d
    }

    pub fn used_mb(&self) -> f64 {
        self.replicas.lock().values().map(|r| r.store.used_mb()).sum()
    }

    async fn join(&self) -> Result<Value, CallError> {
        let msg = ManagerRequest::CargoJoin(self.descriptor());
        via_beacon(self.net.as_ref(), &self.id, &self.cfg.beacon, Target::CargoMgr, &msg, None).await
    }

    fn spawn_heartbeat(self: &Arc<Self>) {
        let me = self.clone();
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(ms_duration(me.cfg.heartbeat_ms)).await;
                if !me.net.liveness().is_up(&me.id) {
                    continue;
                }
                let msg = ManagerRequest::CargoUpdate {
                    node_id: me.id.clone(),
                    used_mb: me.used_mb(),
                };
                let r: Result<Value, _> =
                    via_beacon(me.net.as_ref(), &me.id, &me.cfg.beacon, Target::CargoMgr, &msg, None).await;
                match r {
                    Err(e) if e.code() == Some(REREGISTER) || e.code() == Some(409) => {
                        let _ = me.join().await;
                    }
                    Err(e) => debug!(cargo = %me.id, error = %e, "heartbeat failed"),
                    Ok(_) => {}
                }
            }
        });
    }

    fn spawn_rejoin_watch(self: &Arc<Self>) {
        let me = self.clone();
        tokio::spawn(async move {
            let mut was_up = true;
            loop {
                tokio::time::sleep(Duration::from_millis(250)).await;
                let up = me.net.liveness().status(&me.id) == NodeStatus::Up;
                if up && !was_up {
                    info!(cargo = %me.id, "rejoined; resyncing replicas");
                    let _ = me.join().await;
                    me.resync_all().await;
                }
                was_up = up;
            }
        });
    }

    /// Pulls a snapshot from the nearest reachable chain predecessor, merges
    /// it, then pushes the merged state to every other replica.
    pub async fn resync_all(&self) {
        let sets: Vec<ReplicaSet> = self.replicas.lock().values().map(|r| r.set.clone()).collect();
        for set in sets {
            let sid = set.service_id.clone();
            for peer in predecessors(&set.replicas, &self.id) {
                let msg = CargoRequest::Snapshot { service_id: sid.clone() };
                if let Ok(records) = request::<_, Vec<Record>>(self.net.as_ref(), &self.id, &peer.endpoint, &msg, None).await {
                    self.merge(&sid, records);
                    break;
                }
            }
            let snapshot = match self.replicas.lock().get(&sid) {
                Some(r) => r.store.snapshot(),
                None => continue,
            };
            for peer in chain_after(&set.replicas, &self.id) {
                let msg = CargoRequest::Merge {
                    service_id: sid.clone(),
                    records: snapshot.clone(),
                };
                if let Err(e) = request::<_, Value>(self.net.as_ref(), &self.id, &peer.endpoint, &msg, None).await {
                    debug!(cargo = %self.id, peer = %peer.node_id, error = %e, "push after rejoin failed");
                }
            }
        }
    }

    fn merge(&self, sid: &str, records: Vec<Record>) -> usize {
        match self.replicas.lock().get_mut(sid) {
            Some(r) => r.store.merge(records),
            None => 0,
        }
    }

    fn with_replica<R>(&self, sid: &str, f: impl FnOnce(&mut Replica) -> R) -> Result<R, StorageError> {
        let mut reps = self.replicas.lock();
        let r = reps.get_mut(sid).ok_or_else(|| StorageError::NotHosted(sid.to_string()))?;
        Ok(f(r))
    }

    /// Returns the snapshot of a hosted replica, for tests and tooling.
    pub fn snapshot(&self, sid: &str) -> Option<Vec<Record>> {
        self.replicas.lock().get(sid).map(|r| r.store.snapshot())
    }

    /// Forwards `record` to the first reachable peer in `rest`, which carries
    /// it on down the chain. Unreachable peers are skipped; a timeout fails.
    async fn cascade(&self, sid: &str, record: &Record, mut rest: Vec<CargoPeer>) -> Result<(), StorageError> {
        while !rest.is_empty() {
            let next = rest.remove(0);
            let msg = CargoRequest::Replicate {
                service_id: sid.to_string(),
                record: record.clone(),
                rest: rest.clone(),
            };
            let r: Result<Value, _> =
                request(self.net.as_ref(), &self.id, &next.endpoint, &msg, Some(self.cfg.hop_timeout)).await;
            match r {
                Ok(_) => return Ok(()),
                Err(CallError::Net(NetError::Refused(_) | NetError::Reset(_))) => {
                    debug!(cargo = %self.id, peer = %next.node_id, "skipping unreachable replica");
                }
                Err(CallError::Remote(e)) if e.code == Some(404) => {}
                Err(e) => return Err(StorageError::Replication(format!("{}: {e}", next.node_id))),
            }
        }
        Ok(())
    }

    fn spawn_background_cascade(&self, sid: String, record: Record, rest: Vec<CargoPeer>) {
        let Some(me) = self.me.upgrade() else { return };
        tokio::spawn(async move {
            for attempt in 0..=me.cfg.max_retries {
                match me.cascade(&sid, &record, rest.clone()).await {
                    Ok(()) => return,
                    Err(e) if attempt == me.cfg.max_retries => {
                        warn!(cargo = %me.id, key = %record.key, error = %e, "propagation abandoned");
                    }
                    Err(_) => tokio::time::sleep(ms_duration(me.cfg.retry_ms)).await,
                }
            }
        });
    }

    async fn write(&self, sid: String, key: String, value: Vec<u8>) -> Result<WriteAck, StorageError> {
        check_kv(&key, &value)?;
        let (record, rest, mode) = self.with_replica(&sid, |r| {
            let version = r.store.next_version(&self.id);
            let record = Record { key, value, version };
            r.store.apply(record.clone());
            (record, chain_after(&r.set.replicas, &self.id), r.set.consistency)
        })?;
        let version = record.version.clone();
        match mode {
            Consistency::Strong => self.cascade(&sid, &record, rest).await?,
            Consistency::Eventual => self.spawn_background_cascade(sid, record, rest),
        }
        Ok(WriteAck { version })
    }

    async fn host(&self, set: ReplicaSet, clone_from: Option<CargoPeer>) -> Result<(), StorageError> {
        let sid = set.service_id.clone();
        if let Some(r) = self.replicas.lock().get_mut(&sid) {
            r.set = set;
            return Ok(());
        }
        let records = match &clone_from {
            Some(peer) => {
                let msg = CargoRequest::Snapshot { service_id: sid.clone() };
                request::<_, Vec<Record>>(self.net.as_ref(), &self.id, &peer.endpoint, &msg, None)
                    .await
                    .map_err(|e| StorageError::Replication(format!("clone from {}: {e}", peer.node_id)))?
            }
            None => {
                let data = match &set.data_source {
                    Some(uri) => store::load_dataset(uri)?,
                    None => Vec::new(),
                };
                store::initial_records(data)
            }
        };
        let mut st = match &self.cfg.persist_dir {
            Some(dir) => Store::persistent(&dir.join(format!("{}-{sid}.log", self.id)))?,
            None => Store::new(),
        };
        st.merge(records);
        info!(cargo = %self.id, service = %sid, keys = st.len(), "hosting replica");
        self.replicas.lock().insert(sid, Replica { set, store: st });
        Ok(())
    }

    fn status(&self) -> CargoStatus {
        let reps = self.replicas.lock();
        CargoStatus {
            node_id: self.id.clone(),
            used_mb: reps.values().map(|r| r.store.used_mb()).sum(),
            replicas: reps
                .values()
                .map(|r| ReplicaStatus {
                    service_id: r.set.service_id.clone(),
                    keys: r.store.len(),
                    used_mb: r.store.used_mb(),
                    consistency: r.set.consistency,
                    chain: r.set.ids(),
                })
                .collect(),
        }
    }

    async fn dispatch(&self, req: CargoRequest) -> Result<Reply, StorageError> {
        Ok(match req {
            CargoRequest::InitCargo { service_id } | CargoRequest::CloseCargo { service_id } => {
                self.with_replica(&service_id, |_| ())?;
                Reply::ok(Value::Null)
            }
            CargoRequest::Read { service_id, key } => {
                let record = self.with_replica(&service_id, |r| r.store.get(&key).cloned())?;
                Reply::ok(ReadReply { record })
            }
            CargoRequest::Write { service_id, key, value } => Reply::ok(self.write(service_id, key, value).await?),
            CargoRequest::VectorMatch {
                service_id,
                query,
                threshold,
            } => {
                let best = self.with_replica(&service_id, |r| r.store.vector_match(&query, threshold))??;
                Reply::ok(MatchReply {
                    key: best.as_ref().map(|b| b.0.clone()),
                    distance: best.map(|b| b.1),
                })
            }
            CargoRequest::Host { set, clone_from } => {
                self.host(set, clone_from).await?;
                Reply::ok(Value::Null)
            }
            CargoRequest::Chain { service_id, chain } => {
                self.with_replica(&service_id, |r| r.set.replicas = chain)?;
                Reply::ok(Value::Null)
            }
            CargoRequest::Replicate {
                service_id,
                record,
                rest,
            } => {
                self.with_replica(&service_id, |r| r.store.apply(record.clone()))?;
                self.cascade(&service_id, &record, rest).await?;
                Reply::ok(Value::Null)
            }
            CargoRequest::Snapshot { service_id } => Reply::ok(self.with_replica(&service_id, |r| r.store.snapshot())?),
            CargoRequest::Merge { service_id, records } => {
                let n = self.with_replica(&service_id, |r| r.store.merge(records))?;
                Reply::ok(n)
            }
            CargoRequest::Status => Reply::ok(self.status()),
        })
    }
}

#[async_trait]
impl Handler for Cargo {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let reply = match decode_request::<CargoRequest>(&request) {
            Ok(req) => self.dispatch(req).await.unwrap_or_else(|e| e.reply()),
            Err(r) => r,
        };
        reply.to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peers(ids: &[&str]) -> Vec<CargoPeer> {
        ids.iter()
            .map(|i| CargoPeer {
                node_id: i.to_string(),
                endpoint: Endpoint::node(*i),
            })
            .collect()
    }

    fn ids(v: Vec<CargoPeer>) -> Vec<String> {
        v.into_iter().map(|p| p.node_id).collect()
    }

    #[test]
    fn chain_rotation() {
        let c = peers(&["a", "b", "c"]);
        assert_eq!(ids(chain_after(&c, "a")), ["b", "c"]);
        assert_eq!(ids(chain_after(&c, "b")), ["c", "a"]);
        assert_eq!(ids(predecessors(&c, "b")), ["a", "c"]);
        assert_eq!(ids(chain_after(&c, "x")), ["a", "b", "c"]);
    }
}
