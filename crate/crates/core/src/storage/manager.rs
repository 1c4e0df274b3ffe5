use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use super::{
    CargoCandidate, CargoDescriptor, CargoPeer, CargoRequest, Consistency, ManagerRequest, ProbeFeedback, ReplicaSet,
    StorageError,
};
use crate::geo::{haversine_km, GeoPoint};
use crate::netharness::{Clock, Handler, SharedTransport};
use crate::proto::{decode_request, request, Reply};
use crate::scheduler::NodeState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    pub target_replicas: usize,
    pub max_replicas: usize,
    pub spawn_threshold_ms: f64,
    pub feedback_window: u32,
    pub suspect_ms: f64,
    pub dead_ms: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            target_replicas: 3,
            max_replicas: 5,
            spawn_threshold_ms: 40.0,
            feedback_window: 3,
            suspect_ms: 6000.0,
            dead_ms: 10000.0,
        }
    }
}

/// A replica the manager decided to add after repeated slow probes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spawn {
    pub service_id: String,
    pub cargo: CargoPeer,
    pub clone_from: CargoPeer,
}

#[derive(Debug, Default)]
pub struct ManagerState {
    config: ManagerConfig,
    cargos: BTreeMap<String, CargoDescriptor>,
    sets: BTreeMap<String, ReplicaSet>,
    /// Consecutive over-threshold reports per (captain, service).
    breaches: BTreeMap<(String, String), u32>,
    pub spawn_log: Vec<Spawn>,
}

fn min_distance(p: GeoPoint, locations: &[GeoPoint]) -> f64 {
    locations.iter().map(|l| haversine_km(p, *l)).fold(f64::INFINITY, f64::min)
}

impl ManagerState {
    pub fn new(config: ManagerConfig) -> Self {
        ManagerState {
            config,
            ..Default::default()
        }
    }

    pub fn join(&mut self, mut desc: CargoDescriptor, now_ms: f64) -> Result<(), StorageError> {
        if desc.capacity_mb <= 0.0 || desc.node_id.is_empty() {
            return Err(StorageError::Validation("cargo needs an id and positive capacity".into()));
        }
        match self.cargos.get_mut(&desc.node_id) {
            Some(cur) if cur.state != NodeState::Dead => return Err(StorageError::Duplicate(desc.node_id)),
            Some(cur) => {
                // reservations belong to replica sets and survive a rejoin
                cur.state = NodeState::Alive;
                cur.last_heartbeat_ms = now_ms;
                cur.used_mb = desc.used_mb;
                cur.endpoint = desc.endpoint;
                cur.location = desc.location;
            }
            None => {
                desc.state = NodeState::Alive;
                desc.last_heartbeat_ms = now_ms;
                desc.reserved_mb = 0.0;
                self.cargos.insert(desc.node_id.clone(), desc);
            }
        }
        Ok(())
    }

    pub fn update(&mut self, node_id: &str, used_mb: f64, now_ms: f64) -> Result<(), StorageError> {
        match self.cargos.get_mut(node_id) {
            Some(c) if c.state != NodeState::Dead => {
                c.used_mb = used_mb;
                c.last_heartbeat_ms = now_ms;
                c.state = NodeState::Alive;
                Ok(())
            }
            _ => Err(StorageError::UnknownCargo(node_id.to_string())),
        }
    }

    pub fn tick(&mut self, now_ms: f64) {
        for c in self.cargos.values_mut() {
            let age = now_ms - c.last_heartbeat_ms;
            c.state = match c.state {
                NodeState::Dead => NodeState::Dead,
                _ if age >= self.config.dead_ms => NodeState::Dead,
                NodeState::Alive if age >= self.config.suspect_ms => NodeState::Suspect,
                s => s,
            };
        }
    }

    pub fn cargos(&self) -> Vec<CargoDescriptor> {
        self.cargos.values().cloned().collect()
    }

    pub fn set(&self, sid: &str) -> Option<&ReplicaSet> {
        self.sets.get(sid)
    }

    /// Chooses up to `target_replicas` alive cargos with room for
    /// `capacity_mb`: nearest to any location first, then most free space,
    /// then id.
    pub fn choose(&self, capacity_mb: f64, locations: &[GeoPoint]) -> Vec<CargoDescriptor> {
        let mut fit: Vec<&CargoDescriptor> = self
            .cargos
            .values()
            .filter(|c| c.state == NodeState::Alive && c.free_mb() >= capacity_mb)
            .collect();
        fit.sort_by(|a, b| {
            min_distance(a.location, locations)
                .partial_cmp(&min_distance(b.location, locations))
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.free_mb().partial_cmp(&a.free_mb()).unwrap_or(Ordering::Equal))
                .then_with(|| a.node_id.cmp(&b.node_id))
        });
        fit.into_iter().take(self.config.target_replicas).cloned().collect()
    }

    /// Reserves capacity and records the set; chain order is placement order.
    pub fn register(
        &mut self,
        service_id: &str,
        capacity_mb: f64,
        consistency: Consistency,
        data_source: Option<String>,
        locations: &[GeoPoint],
    ) -> Result<ReplicaSet, StorageError> {
        if self.sets.contains_key(service_id) {
            return Err(StorageError::Validation(format!("storage for {service_id} already registered")));
        }
        if !(capacity_mb > 0.0) || locations.is_empty() {
            return Err(StorageError::Validation("capacity must be positive and locations non-empty".into()));
        }
        let chosen = self.choose(capacity_mb, locations);
        if chosen.is_empty() {
            return Err(StorageError::NoCapacity);
        }
        for c in &chosen {
            if let Some(cur) = self.cargos.get_mut(&c.node_id) {
                cur.reserved_mb += capacity_mb;
            }
        }
        let set = ReplicaSet {
            service_id: service_id.to_string(),
            consistency,
            replicas: chosen.iter().map(|c| c.peer()).collect(),
            capacity_mb,
            data_source,
            degraded: chosen.len() < self.config.target_replicas,
        };
        self.sets.insert(service_id.to_string(), set.clone());
        Ok(set)
    }

    /// Drops replicas that could not be created and releases their space.
    pub fn drop_replicas(&mut self, service_id: &str, failed: &[String]) {
        let Some(set) = self.sets.get_mut(service_id) else { return };
        set.replicas.retain(|p| !failed.contains(&p.node_id));
        set.degraded = set.replicas.len() < self.config.target_replicas;
        for id in failed {
            if let Some(c) = self.cargos.get_mut(id) {
                c.reserved_mb = (c.reserved_mb - set.capacity_mb).max(0.0);
            }
        }
        if set.replicas.is_empty() {
            self.sets.remove(service_id);
        }
    }

    /// Live replicas ranked by distance to the asking captain.
    pub fn discover(&self, service_id: &str, at: GeoPoint) -> Result<Vec<CargoCandidate>, StorageError> {
        let set = self
            .sets
            .get(service_id)
            .ok_or_else(|| StorageError::UnknownService(service_id.to_string()))?;
        let mut out: Vec<CargoCandidate> = set
            .replicas
            .iter()
            .filter_map(|p| self.cargos.get(&p.node_id))
            .filter(|c| c.state != NodeState::Dead)
            .map(|c| CargoCandidate {
                node_id: c.node_id.clone(),
                endpoint: c.peer().endpoint,
                distance_km: haversine_km(c.location, at),
            })
            .collect();
        if out.is_empty() {
            return Err(StorageError::NoReplicas);
        }
        out.sort_by(|a, b| {
            a.distance_km
                .partial_cmp(&b.distance_km)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.node_id.cmp(&b.node_id))
        });
        Ok(out)
    }

    /// Counts consecutive slow reports; after `feedback_window` of them,
    /// picks a closer cargo with room and appends it to the chain.
    pub fn feedback(&mut self, fb: &ProbeFeedback) -> Option<Spawn> {
        let key = (fb.captain_id.clone(), fb.service_id.clone());
        if fb.best_ms <= self.config.spawn_threshold_ms {
            self.breaches.remove(&key);
            return None;
        }
        let n = self.breaches.entry(key.clone()).or_insert(0);
        *n += 1;
        if *n < self.config.feedback_window {
            return None;
        }
        let set = self.sets.get(&fb.service_id)?;
        if set.replicas.len() >= self.config.max_replicas {
            return None;
        }
        let held: Vec<&CargoDescriptor> = set.replicas.iter().filter_map(|p| self.cargos.get(&p.node_id)).collect();
        let nearest_held = held
            .iter()
            .map(|c| haversine_km(c.location, fb.location))
            .fold(f64::INFINITY, f64::min);
        let source = held
            .iter()
            .find(|c| c.node_id == fb.best_cargo && c.state == NodeState::Alive)
            .or_else(|| held.iter().find(|c| c.state == NodeState::Alive))?
            .peer();
        let capacity = set.capacity_mb;
        let pick = self
            .cargos
            .values()
            .filter(|c| c.state == NodeState::Alive && c.free_mb() >= capacity)
            .filter(|c| !set.replicas.iter().any(|p| p.node_id == c.node_id))
            .map(|c| (haversine_km(c.location, fb.location), c))
            .filter(|(d, _)| *d < nearest_held)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| a.1.node_id.cmp(&b.1.node_id)))
            .map(|(_, c)| c.peer());
        let Some(cargo) = pick else {
            info!(service = %fb.service_id, "slow storage access but no closer cargo with capacity");
            return None;
        };
        self.breaches.remove(&key);
        if let Some(c) = self.cargos.get_mut(&cargo.node_id) {
            c.reserved_mb += capacity;
        }
        let set = self.sets.get_mut(&fb.service_id)?;
        set.replicas.push(cargo.clone());
        let spawn = Spawn {
            service_id: fb.service_id.clone(),
            cargo,
            clone_from: source,
        };
        self.spawn_log.push(spawn.clone());
        Some(spawn)
    }
}

pub struct CargoManager {
    id: String,
    net: SharedTransport,
    clock: Clock,
    state: Mutex<ManagerState>,
}

impl CargoManager {
    pub fn new(id: &str, net: SharedTransport, clock: Clock, config: ManagerConfig) -> Arc<Self> {
        Arc::new(CargoManager {
            id: id.to_string(),
            net,
            clock,
            state: Mutex::new(ManagerState::new(config)),
        })
    }

    pub fn with_state<R>(&self, f: impl FnOnce(&mut ManagerState) -> R) -> R {
        f(&mut self.state.lock())
    }

    pub fn spawn_monitor(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(Duration::from_millis(1000)).await;
                let now = me.clock.now_ms();
                me.state.lock().tick(now);
            }
        })
    }

    async fn push_chain(&self, set: &ReplicaSet) {
        for p in &set.replicas {
            let msg = CargoRequest::Chain {
                service_id: set.service_id.clone(),
                chain: set.replicas.clone(),
            };
            if let Err(e) = request::<_, Value>(self.net.as_ref(), &self.id, &p.endpoint, &msg, None).await {
                warn!(cargo = %p.node_id, error = %e, "chain update not delivered");
            }
        }
    }

    async fn store_register(
        &self,
        service_id: String,
        capacity_mb: f64,
        consistency: Consistency,
        data_source: Option<String>,
        locations: Vec<GeoPoint>,
    ) -> Result<ReplicaSet, StorageError> {
        let set = self
            .state
            .lock()
            .register(&service_id, capacity_mb, consistency, data_source, &locations)?;
        let mut failed = Vec::new();
        for p in &set.replicas {
            let msg = CargoRequest::Host {
                set: set.clone(),
                clone_from: None,
            };
            if let Err(e) = request::<_, Value>(self.net.as_ref(), &self.id, &p.endpoint, &msg, None).await {
                warn!(cargo = %p.node_id, error = %e, "replica creation failed");
                failed.push(p.node_id.clone());
            }
        }
        if failed.is_empty() {
            info!(service = %service_id, replicas = ?set.ids(), "storage registered");
            return Ok(set);
        }
        let remaining = {
            let mut st = self.state.lock();
            st.drop_replicas(&service_id, &failed);
            st.set(&service_id).cloned()
        };
        match remaining {
            Some(set) => {
                self.push_chain(&set).await;
                Ok(set)
            }
            None => Err(StorageError::Replication("no replica could be created".into())),
        }
    }

    async fn spawn_replica(&self, spawn: Spawn) {
        let Some(set) = self.state.lock().set(&spawn.service_id).cloned() else { return };
        let msg = CargoRequest::Host {
            set: set.clone(),
            clone_from: Some(spawn.clone_from.clone()),
        };
        match request::<_, Value>(self.net.as_ref(), &self.id, &spawn.cargo.endpoint, &msg, None).await {
            Ok(_) => {
                info!(service = %spawn.service_id, cargo = %spawn.cargo.node_id, "storage replica added");
                self.push_chain(&set).await;
            }
            Err(e) => {
                warn!(cargo = %spawn.cargo.node_id, error = %e, "storage scale-out failed");
                self.state.lock().drop_replicas(&spawn.service_id, &[spawn.cargo.node_id.clone()]);
            }
        }
    }

    async fn dispatch(&self, req: ManagerRequest) -> Result<Reply, StorageError> {
        let now = self.clock.now_ms();
        Ok(match req {
            ManagerRequest::CargoJoin(desc) => {
                self.state.lock().join(desc, now)?;
                Reply::ok(Value::Null)
            }
            ManagerRequest::CargoUpdate { node_id, used_mb } => {
                self.state.lock().update(&node_id, used_mb, now)?;
                Reply::ok(Value::Null)
            }
            ManagerRequest::StoreRegister {
                service_id,
                capacity_mb,
                consistency,
                data_source,
                locations,
            } => {
                let set = self
                    .store_register(service_id, capacity_mb, consistency, data_source, locations)
                    .await?;
                let detail = if set.degraded { "DEGRADED: fewer replicas than target" } else { "" };
                Reply::ok_detail(set, detail)
            }
            ManagerRequest::CargoDiscover {
                location, service_id, ..
            } => Reply::ok(self.state.lock().discover(&service_id, location)?),
            ManagerRequest::ProbeFeedback(fb) => {
                let spawn = self.state.lock().feedback(&fb);
                if let Some(s) = spawn.clone() {
                    self.spawn_replica(s).await;
                }
                Reply::ok(spawn.map(|s| s.cargo.node_id))
            }
            ManagerRequest::ListCargos => Reply::ok(self.state.lock().cargos()),
            ManagerRequest::ReplicaSet { service_id } => {
                let st = self.state.lock();
                Reply::ok(st.set(&service_id).ok_or(StorageError::UnknownService(service_id.clone()))?)
            }
        })
    }
}

#[async_trait]
impl Handler for CargoManager {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let reply = match decode_request::<ManagerRequest>(&request) {
            Ok(req) => self.dispatch(req).await.unwrap_or_else(|e| e.reply()),
            Err(r) => r,
        };
        reply.to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn state(cargos: &[(&str, f64, f64, f64)]) -> ManagerState {
        let mut st = ManagerState::new(ManagerConfig::default());
        for (id, lat, lon, cap) in cargos {
            st.join(CargoDescriptor::new(id, p(*lat, *lon), *cap), 0.0).unwrap();
        }
        st
    }

    #[test]
    fn nearest_three_then_capacity() {
        let mut st = state(&[
            ("far", 45.5, -93.0, 100.0),
            ("a", 44.98, -93.26, 100.0),
            ("b", 44.99, -93.25, 100.0),
            ("c", 45.1, -93.2, 100.0),
        ]);
        let set = st.register("s", 10.0, Consistency::Strong, None, &[p(44.98, -93.26)]).unwrap();
        assert_eq!(set.ids(), ["a", "b", "c"]);
        assert!(!set.degraded);
        let reserved: f64 = st.cargos().iter().map(|c| c.reserved_mb).sum();
        assert_eq!(reserved, 30.0);
    }

    #[test]
    fn two_cargos_degraded_and_capacity_respected() {
        let mut st = state(&[("a", 44.98, -93.26, 15.0), ("b", 44.99, -93.25, 15.0)]);
        let set = st.register("s", 10.0, Consistency::Eventual, None, &[p(44.98, -93.26)]).unwrap();
        assert!(set.degraded);
        assert_eq!(set.replicas.len(), 2);
        assert_eq!(
            st.register("t", 10.0, Consistency::Eventual, None, &[p(44.98, -93.26)]),
            Err(StorageError::NoCapacity)
        );
        for c in st.cargos() {
            assert!(c.reserved_mb <= c.capacity_mb);
        }
    }

    #[test]
    fn feedback_window_spawns_once() {
        let mut st = state(&[
            ("a", 44.98, -93.26, 100.0),
            ("b", 44.99, -93.25, 100.0),
            ("c", 45.0, -93.2, 100.0),
            ("remote", 41.88, -87.63, 100.0),
        ]);
        st.register("s", 10.0, Consistency::Eventual, None, &[p(44.98, -93.26)]).unwrap();
        let fb = ProbeFeedback {
            captain_id: "cap".into(),
            location: p(41.87, -87.62),
            service_id: "s".into(),
            best_cargo: "a".into(),
            best_ms: 80.0,
        };
        assert!(st.feedback(&fb).is_none());
        assert!(st.feedback(&fb).is_none());
        let s = st.feedback(&fb).unwrap();
        assert_eq!(s.cargo.node_id, "remote");
        assert_eq!(st.set("s").unwrap().ids(), ["a", "b", "c", "remote"]);
        for _ in 0..6 {
            assert!(st.feedback(&fb).is_none());
        }
    }
}
