use std::sync::Arc;
use std::time::Duration;

use armada_lite::control_plane::select::candidates;
use armada_lite::control_plane::{
    AmConfig, AmState, Beacon, Hosted, Rank, ScaleAction, ScaleKind, SelectWeights, ServiceSpec, UserQuery,
};
use armada_lite::geo::GeoPoint;
use armada_lite::netharness::{EmulatedNet, Endpoint, Handler, LatencyMatrix, SharedTransport, Transport};
use armada_lite::proto::{Reply, Status};
use armada_lite::scheduler::{ComputeReq, ImageRef, NetType, NodeDescriptor, NodeState, TaskRecord, TaskState, WorkloadSpec};
use async_trait::async_trait;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

// ---------------------------------------------------------------- beacon

/// Replies with whatever it was sent, wrapped in an ok envelope.
struct Mirror;

#[async_trait]
impl Handler for Mirror {
    async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
        let v: Value = serde_json::from_slice(&request).unwrap();
        Reply::ok(v).to_bytes()
    }
}

async fn beacon_net() -> Arc<EmulatedNet> {
    let net = EmulatedNet::new(LatencyMatrix::new(2.0).unwrap(), 5);
    let shared: SharedTransport = net.clone();
    net.bind(Endpoint::node("am"), Arc::new(Mirror)).await.unwrap();
    net.bind(Endpoint::node("spinner"), Arc::new(Mirror)).await.unwrap();
    // the cargo manager is never bound, so forwards to it fail
    let beacon = Beacon::new(
        "beacon",
        shared,
        Endpoint::node("am"),
        Endpoint::node("spinner"),
        Endpoint::node("mgr"),
    )
    .with_timeout(Duration::from_millis(500));
    net.bind(Endpoint::node("beacon"), Arc::new(beacon)).await.unwrap();
    net
}

async fn send(net: &EmulatedNet, body: &[u8]) -> Reply {
    let bytes = net.call("user", &Endpoint::node("beacon"), body.to_vec()).await.unwrap();
    Reply::from_bytes(&bytes).unwrap()
}

#[tokio::test(start_paused = true)]
async fn beacon_strips_target_and_forwards() {
    let net = beacon_net().await;
    let req = json!({"target": "spinner", "type": "ListNodes", "body": {"x": 1}});
    let reply = send(&net, req.to_string().as_bytes()).await;
    assert_eq!(reply.status, Status::Ok);
    assert_eq!(reply.body, json!({"type": "ListNodes", "body": {"x": 1}}));
}

#[tokio::test(start_paused = true)]
async fn beacon_rejects_bad_envelopes() {
    let net = beacon_net().await;
    let cases: [&[u8]; 5] = [
        b"{not json",
        b"[1, 2]",
        br#"{"type": "ListNodes"}"#,
        br#"{"target": "nobody", "type": "ListNodes"}"#,
        br#"{"target": "am"}"#,
    ];
    for body in cases {
        let reply = send(&net, body).await;
        assert_eq!(reply.status, Status::Error, "{}", String::from_utf8_lossy(body));
        assert_eq!(reply.code, Some(400), "{}", reply.detail);
    }
}

#[tokio::test(start_paused = true)]
async fn beacon_reports_unreachable_manager() {
    let net = beacon_net().await;
    let reply = send(&net, br#"{"target": "cargo_mgr", "type": "Discover"}"#).await;
    assert_eq!(reply.code, Some(502));
    assert!(reply.detail.contains("mgr"), "{}", reply.detail);
}

// ---------------------------------------------------------------- selection oracle

fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dl = (b.lon() - a.lon()).to_radians();
    let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

fn near(center: GeoPoint, p: GeoPoint, precision: u8) -> bool {
    let enc = |g: GeoPoint| geohash::encode(geohash::Coord { x: g.lon(), y: g.lat() }, precision as usize).unwrap();
    let c = enc(center);
    let n = geohash::neighbors(&c).unwrap();
    [c, n.n, n.ne, n.e, n.se, n.s, n.sw, n.w, n.nw].contains(&enc(p))
}

fn affinity(node: NetType, want: NetType) -> f64 {
    use NetType::*;
    match (node, want) {
        (a, b) if a == b => 1.0,
        (Wifi, Cellular) | (Cellular, Wifi) => 0.5,
        _ => 0.0,
    }
}

/// Straight-line restatement of the selection rule: widen, score, sort, cut.
fn expected(q: &UserQuery, hosts: &[Hosted], w: SelectWeights, start: u8, top_n: usize) -> Vec<(String, f64)> {
    let mut p = start;
    let local: Vec<&Hosted> = loop {
        let found: Vec<&Hosted> = hosts.iter().filter(|h| near(q.loc, h.node.location, p)).collect();
        if found.len() >= top_n.max(1) || p == 1 {
            break found;
        }
        p -= 1;
    };
    let free_cpu = |h: &Hosted| (h.node.cpu_capacity - h.node.cpu_used - h.inflight as f64).max(0.0);
    let free_mem = |h: &Hosted| (h.node.mem_capacity - h.node.mem_used).max(0.0);
    let max_cpu = local.iter().map(|h| free_cpu(h)).fold(0.0f64, f64::max);
    let max_mem = local.iter().map(|h| free_mem(h)).fold(0.0f64, f64::max);
    let sum = w.w_resource + w.w_affinity + w.w_distance;
    let mut rows: Vec<(String, f64, f64)> = local
        .iter()
        .map(|h| {
            let km = haversine(q.loc, h.node.location);
            let r_cpu = if max_cpu > 0.0 { free_cpu(h) / max_cpu } else { 0.0 };
            let r_mem = if max_mem > 0.0 { free_mem(h) / max_mem } else { 0.0 };
            let aff = q.net_type.map_or(0.0, |t| affinity(h.node.net_type, t));
            let dist = 1.0 - (km / 100.0).min(1.0);
            let s = (w.w_resource * 0.5 * (r_cpu + r_mem) + w.w_affinity * aff + w.w_distance * dist) / sum;
            (h.task.task_id.clone(), s, km)
        })
        .collect();
    rows.sort_by(|a, b| {
        if (a.1 - b.1).abs() > 1e-9 {
            b.1.partial_cmp(&a.1).unwrap()
        } else {
            a.2.partial_cmp(&b.2).unwrap().then_with(|| a.0.cmp(&b.0))
        }
    });
    rows.into_iter().take(top_n).map(|(id, s, _)| (id, s)).collect()
}

fn random_hosts(rng: &mut ChaCha8Rng) -> Vec<Hosted> {
    let nets = [NetType::Wifi, NetType::Ethernet, NetType::Cellular, NetType::Other];
    let n = rng.gen_range(1..=8);
    (0..n)
        .map(|i| {
            let loc = pt(44.9 + rng.gen_range(-0.6..0.6), -93.2 + rng.gen_range(-0.6..0.6));
            let cap = rng.gen_range(1..=8) as f64;
            let mut node = NodeDescriptor::new(&format!("n{i}"), loc, nets[rng.gen_range(0..4)], cap, rng.gen_range(1.0..16.0));
            node.cpu_used = rng.gen_range(0.0..cap);
            node.mem_used = rng.gen_range(0.0..node.mem_capacity);
            let req = ComputeReq { cpu: 1.0, mem: 1.0 };
            let mut task = TaskRecord::new(&format!("t{}", n - i), "svc", &node.node_id, req);
            task.state = TaskState::Running;
            task.endpoint = Some(Endpoint::node(node.node_id.clone()));
            Hosted {
                task,
                node,
                inflight: rng.gen_range(0..4),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn candidates_match_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hosts = random_hosts(&mut rng);
        let q = UserQuery {
            user_id: "u".into(),
            loc: pt(44.9 + rng.gen_range(-0.6..0.6), -93.2 + rng.gen_range(-0.6..0.6)),
            net_type: if rng.gen_bool(0.7) { Some(NetType::Wifi) } else { None },
        };
        let w = SelectWeights { w_resource: rng.gen_range(0.0..1.0), w_affinity: rng.gen_range(0.0..1.0), w_distance: rng.gen_range(0.1..1.0) };
        let start = rng.gen_range(2..=6);
        let top_n = rng.gen_range(1..=5);
        let got = candidates(&q, &hosts, &w, start, top_n, Rank::Score);
        let want = expected(&q, &hosts, w, start, top_n);
        prop_assert_eq!(got.len(), want.len());
        for (g, (id, s)) in got.iter().zip(&want) {
            prop_assert_eq!(&g.task_id, id);
            prop_assert!((g.score - s).abs() < 1e-9, "{} vs {}", g.score, s);
        }
    }

    #[test]
    fn distance_rank_is_sorted_by_km(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hosts = random_hosts(&mut rng);
        let q = UserQuery { user_id: "u".into(), loc: pt(44.9, -93.2), net_type: None };
        let got = candidates(&q, &hosts, &SelectWeights::default(), 4, hosts.len(), Rank::Distance);
        prop_assert!(!got.is_empty());
        for w in got.windows(2) {
            prop_assert!(w[0].distance_km <= w[1].distance_km);
        }
    }
}

// ---------------------------------------------------------------- AM planning

const MPLS: (f64, f64) = (44.97, -93.23);
const CHICAGO: (f64, f64) = (41.88, -87.63);

fn spec(floor: usize) -> ServiceSpec {
    ServiceSpec {
        service_id: "svc".into(),
        image: ImageRef {
            name: "app".into(),
            layers: Vec::new(),
            start_ms: 0,
        },
        compute_req: ComputeReq { cpu: 1.0, mem: 1.0 },
        sched_policy: None,
        locations: vec![pt(MPLS.0, MPLS.1)],
        need_storage: false,
        storage_req: None,
        net_type: None,
        workload: WorkloadSpec::compute_echo(20.0),
        initial_replicas: floor,
        top_n: 3,
        autoscale: true,
    }
}

fn node(id: &str, at: (f64, f64)) -> NodeDescriptor {
    NodeDescriptor::new(id, pt(at.0, at.1), NetType::Wifi, 4.0, 8.0)
}

fn running(id: &str, node: &str) -> TaskRecord {
    let mut t = TaskRecord::new(id, "svc", node, ComputeReq { cpu: 1.0, mem: 1.0 });
    t.state = TaskState::Running;
    t.endpoint = Some(Endpoint::node(node));
    t
}

fn am() -> AmState {
    AmState::new(AmConfig::new(Endpoint::node("spinner"), Endpoint::node("mgr")))
}

fn kinds(actions: &[ScaleAction]) -> Vec<ScaleKind> {
    actions
        .iter()
        .map(|a| match a {
            ScaleAction::Deploy { kind, .. } => *kind,
            ScaleAction::Cancel { .. } => ScaleKind::Down,
        })
        .collect()
}

#[test]
fn admit_validates_and_refuses_duplicates() {
    let mut s = am();
    let mut bad = spec(1);
    bad.locations.clear();
    assert_eq!(s.admit(bad).unwrap_err().code, Some(400));
    s.admit(spec(1)).unwrap();
    assert_eq!(s.admit(spec(1)).unwrap_err().code, Some(409));
    s.reject("svc", "no nodes");
    s.admit(spec(1)).expect("rejected service may be resubmitted");
}

#[test]
fn floor_is_restored_with_backoff() {
    let mut s = am();
    s.admit(spec(3)).unwrap();
    s.observe(vec![node("a", MPLS), node("b", MPLS)], vec![running("t1", "a")]);
    let actions = s.plan("svc", 0.0);
    assert_eq!(kinds(&actions), vec![ScaleKind::Floor, ScaleKind::Floor]);
    let ScaleAction::Deploy { anti_affinity, .. } = &actions[0] else { unreachable!() };
    assert_eq!(anti_affinity, &vec!["a".to_string()]);

    s.record("svc", &actions[0], Err("no capacity".into()), 0.0);
    assert!(s.plan("svc", 1000.0).is_empty(), "first failure backs off");
    assert_eq!(s.plan("svc", 2000.0).len(), 2);

    s.record("svc", &actions[0], Err("no capacity".into()), 2000.0);
    assert!(s.plan("svc", 5000.0).is_empty(), "second failure doubles the wait");
    assert_eq!(s.plan("svc", 6000.0).len(), 2);
}

#[test]
fn joining_node_clears_backoff() {
    let mut s = am();
    s.admit(spec(2)).unwrap();
    s.observe(vec![node("a", MPLS)], vec![running("t1", "a")]);
    let actions = s.plan("svc", 0.0);
    s.record("svc", &actions[0], Err("no capacity".into()), 0.0);
    assert!(s.plan("svc", 100.0).is_empty());

    let mut back = node("b", MPLS);
    back.state = NodeState::Suspect;
    s.observe(vec![node("a", MPLS), back.clone()], vec![running("t1", "a")]);
    assert!(s.plan("svc", 200.0).is_empty(), "a suspect node is not a new home");

    back.state = NodeState::Alive;
    s.observe(vec![node("a", MPLS), back], vec![running("t1", "a")]);
    assert_eq!(kinds(&s.plan("svc", 300.0)), vec![ScaleKind::Floor]);
}

#[test]
fn uncovered_users_trigger_scale_up_only_with_local_room() {
    let mut s = am();
    s.admit(spec(1)).unwrap();
    let tasks = vec![running("t1", "a")];
    s.observe(vec![node("a", MPLS)], tasks.clone());
    let q = UserQuery {
        user_id: "far".into(),
        loc: pt(CHICAGO.0, CHICAGO.1),
        net_type: None,
    };
    let list = s.select("svc", &q, Rank::Score, 0.0).unwrap();
    assert_eq!(list.entries[0].task_id, "t1");
    assert!(s.plan("svc", 10.0).is_empty(), "nowhere near the user to put a replica");

    s.observe(vec![node("a", MPLS), node("chi", CHICAGO)], tasks);
    let actions = s.plan("svc", 20.0);
    assert_eq!(kinds(&actions), vec![ScaleKind::Up]);
    let ScaleAction::Deploy { target, cell, anti_affinity, .. } = &actions[0] else { unreachable!() };
    assert_eq!(*target, q.loc);
    assert!(cell.is_some());
    assert_eq!(anti_affinity, &vec!["a".to_string()]);
}

#[test]
fn idle_surplus_is_retired() {
    let mut s = am();
    s.admit(spec(1)).unwrap();
    s.observe(vec![node("a", MPLS), node("b", MPLS)], vec![running("t1", "a"), running("t2", "b")]);
    assert!(s.plan("svc", 0.0).is_empty());
    let ttl = s.config().idle_ttl_ms;
    assert!(s.plan("svc", ttl - 1.0).is_empty());
    let actions = s.plan("svc", ttl);
    assert_eq!(actions.len(), 1);
    assert!(matches!(&actions[0], ScaleAction::Cancel { task_id, .. } if task_id == "t1"));
}

#[test]
fn selection_errors() {
    let mut s = am();
    let q = UserQuery {
        user_id: "u".into(),
        loc: pt(MPLS.0, MPLS.1),
        net_type: None,
    };
    assert_eq!(s.select("nope", &q, Rank::Score, 0.0).unwrap_err().code, Some(404));
    s.admit(spec(1)).unwrap();
    assert_eq!(s.select("svc", &q, Rank::Score, 0.0).unwrap_err().code, Some(503));
    s.reject("svc", "storage");
    assert_eq!(s.select("svc", &q, Rank::Score, 0.0).unwrap_err().code, Some(503));
}
