use std::collections::BTreeSet;

use armada_lite::geo::GeoPoint;
use armada_lite::scheduler::policy::{rank_order, schedule};
use armada_lite::scheduler::{
    CaptainUpdate, ComputeReq, ImageRef, Layer, NetType, NodeDescriptor, NodeState, PolicyWeights, SchedError,
    SpinnerConfig, SpinnerState, TaskRequest, TaskState, WorkloadSpec,
};
use proptest::prelude::*;

const LAYERS: [&str; 3] = ["base", "rt", "app"];

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

fn request(target: GeoPoint, cpu: f64, anti: Vec<String>) -> TaskRequest {
    TaskRequest {
        service_id: "svc".into(),
        image: ImageRef {
            name: "img".into(),
            layers: LAYERS
                .iter()
                .map(|d| Layer {
                    digest: d.to_string(),
                    pull_ms: 100,
                })
                .collect(),
            start_ms: 50,
        },
        compute_req: ComputeReq { cpu, mem: 1.0 },
        target_location: target,
        custom_policy: None,
        net_type: Some(NetType::Wifi),
        workload: WorkloadSpec::compute_echo(10.0),
        anti_affinity: anti,
        need_storage: false,
    }
}

fn arb_node(i: usize) -> impl Strategy<Value = NodeDescriptor> {
    (
        -0.4f64..0.4,
        -0.4f64..0.4,
        1u32..8,
        0.0f64..1.0,
        prop::sample::subsequence(LAYERS.to_vec(), 0..=3),
        prop::sample::select(vec![NodeState::Alive, NodeState::Alive, NodeState::Suspect, NodeState::Dead]),
        prop::sample::select(vec![NetType::Wifi, NetType::Ethernet, NetType::Cellular, NetType::Other]),
    )
        .prop_map(move |(dlat, dlon, cap, used, layers, state, net)| {
            let cap = cap as f64;
            let mut n = NodeDescriptor::new(&format!("n{i}"), pt(44.9 + dlat, -93.2 + dlon), net, cap, 16.0)
                .with_layers(layers);
            n.cpu_used = (used * cap).floor();
            n.state = state;
            n
        })
}

fn arb_nodes() -> impl Strategy<Value = Vec<NodeDescriptor>> {
    (1usize..9).prop_flat_map(|n| (0..n).map(arb_node).collect::<Vec<_>>())
}

proptest! {
    #[test]
    fn placement_is_the_head_of_a_sorted_ranking(nodes in arb_nodes(), min_count in 1usize..5) {
        let req = request(pt(44.9, -93.2), 1.0, Vec::new());
        match schedule(&req, &nodes, &PolicyWeights::default(), None, 5, min_count) {
            Ok(p) => {
                prop_assert_eq!(&p.node_id, &p.ranking[0].node_id);
                for w in p.ranking.windows(2) {
                    prop_assert_ne!(rank_order(&w[0], &w[1]), std::cmp::Ordering::Greater);
                }
                for s in &p.ranking {
                    let n = nodes.iter().find(|n| n.node_id == s.node_id).unwrap();
                    prop_assert_eq!(n.state, NodeState::Alive);
                    prop_assert!(n.free_cpu() >= 1.0);
                }
                prop_assert!(!p.prefetch.contains(&p.node_id));
                for id in &p.prefetch {
                    let n = nodes.iter().find(|n| &n.node_id == id).unwrap();
                    prop_assert!(LAYERS.iter().any(|l| !n.image_layers.contains(*l)));
                }
            }
            Err(SchedError::NoNodes) => prop_assert!(nodes.iter().all(|n| n.state != NodeState::Alive)),
            Err(SchedError::NoCapacity) => {}
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn scaling_weights_changes_nothing(nodes in arb_nodes(), k in 0.01f64..100.0) {
        let req = request(pt(44.9, -93.2), 1.0, Vec::new());
        let w = PolicyWeights { w_resource: 0.3, w_affinity: 0.1, w_layers: 0.4, w_distance: 0.2 };
        let scaled = PolicyWeights {
            w_resource: w.w_resource * k,
            w_affinity: w.w_affinity * k,
            w_layers: w.w_layers * k,
            w_distance: w.w_distance * k,
        };
        let a = schedule(&req, &nodes, &w, None, 5, 2);
        let b = schedule(&req, &nodes, &scaled, None, 5, 2);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.node_id, b.node_id);
                prop_assert!((a.score - b.score).abs() < 1e-9);
            }
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    /// Anti-affinity steers away whenever any other survivor exists.
    #[test]
    fn anti_affinity_is_soft(nodes in arb_nodes(), avoid in prop::collection::btree_set(0usize..9, 0..9)) {
        let anti: Vec<String> = avoid.iter().map(|i| format!("n{i}")).collect();
        let plain = request(pt(44.9, -93.2), 1.0, Vec::new());
        let spread = request(pt(44.9, -93.2), 1.0, anti.clone());
        let Ok(base) = schedule(&plain, &nodes, &PolicyWeights::default(), None, 5, 2) else {
            return Ok(());
        };
        let p = schedule(&spread, &nodes, &PolicyWeights::default(), None, 5, 2).expect("soft constraint never rejects");
        let others = base.ranking.iter().any(|s| !anti.contains(&s.node_id));
        prop_assert_eq!(!anti.contains(&p.node_id), others);
    }

    /// Back-to-back placements reserve capacity, so nothing is double booked
    /// and every slot in reach gets used exactly once.
    #[test]
    fn reservations_fill_capacity_exactly(
        caps in prop::collection::vec(1u32..6, 1..6),
        cpu in prop::sample::select(vec![0.5, 1.0, 2.0]),
    ) {
        let config = SpinnerConfig { min_count: caps.len(), ..Default::default() };
        let mut s = SpinnerState::new(config);
        for (i, c) in caps.iter().enumerate() {
            let n = NodeDescriptor::new(&format!("n{i}"), pt(44.9 + 0.05 * i as f64, -93.2), NetType::Wifi, *c as f64, 64.0);
            s.join(n, 0.0).unwrap();
        }
        let req = request(pt(44.9, -93.2), cpu, Vec::new());
        let mut placed = 0usize;
        loop {
            match s.place(&req, &BTreeSet::new()) {
                Ok(_) => placed += 1,
                Err(SchedError::NoCapacity) => break,
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
            prop_assert!(placed <= 100);
        }
        let slots: usize = caps.iter().map(|c| (*c as f64 / cpu).floor() as usize).sum();
        prop_assert_eq!(placed, slots);
        for n in s.snapshot() {
            prop_assert!(n.cpu_used <= n.cpu_capacity);
        }
    }
}

fn update(node: &str, incarnation: u64, tasks: Vec<armada_lite::scheduler::TaskRecord>) -> CaptainUpdate {
    CaptainUpdate {
        node_id: node.into(),
        cpu_used: tasks.iter().map(|t| t.cpu_used).sum(),
        mem_used: tasks.iter().map(|t| t.mem_used).sum(),
        tasks,
        image_layers: BTreeSet::new(),
        incarnation,
    }
}

#[test]
fn reported_tasks_stop_counting_as_reservations() {
    let mut s = SpinnerState::new(SpinnerConfig::default());
    s.join(NodeDescriptor::new("a", pt(44.9, -93.2), NetType::Wifi, 4.0, 8.0), 0.0).unwrap();
    let req = request(pt(44.9, -93.2), 1.0, Vec::new());
    let (mut t, _) = s.place(&req, &BTreeSet::new()).unwrap();
    assert_eq!(s.snapshot()[0].cpu_used, 1.0);
    t.state = TaskState::Running;
    s.update(update("a", 0, vec![t.clone()]), 100.0).unwrap();
    assert_eq!(s.snapshot()[0].cpu_used, 1.0, "reported usage replaces the reservation");
    assert_eq!(s.task(&t.task_id).unwrap().state, TaskState::Running);
}

#[test]
fn restart_and_death_fail_tasks() {
    let mut s = SpinnerState::new(SpinnerConfig::default());
    s.join(NodeDescriptor::new("a", pt(44.9, -93.2), NetType::Wifi, 4.0, 8.0), 0.0).unwrap();
    let req = request(pt(44.9, -93.2), 1.0, Vec::new());
    let (t1, _) = s.place(&req, &BTreeSet::new()).unwrap();
    let (t2, _) = s.place(&req, &BTreeSet::new()).unwrap();
    s.update(update("a", 0, vec![t1.clone()]), 100.0).unwrap();
    assert_eq!(s.task(&t2.task_id).unwrap().state, TaskState::Pending, "not yet reported is fine");

    s.update(update("a", 1, Vec::new()), 200.0).unwrap();
    assert_eq!(s.task(&t1.task_id).unwrap().state, TaskState::Failed);
    assert_eq!(s.task(&t2.task_id).unwrap().state, TaskState::Failed);

    let (t3, _) = s.place(&req, &BTreeSet::new()).unwrap();
    let dead_at = 200.0 + s.config().dead_ms;
    assert_eq!(s.tick(200.0 + s.config().suspect_ms), vec![("a".to_string(), NodeState::Suspect)]);
    assert_eq!(s.tick(dead_at), vec![("a".to_string(), NodeState::Dead)]);
    assert_eq!(s.task(&t3.task_id).unwrap().state, TaskState::Failed);
    assert!(matches!(s.update(update("a", 1, Vec::new()), dead_at + 1.0), Err(SchedError::UnknownNode(_))));
    assert!(matches!(s.place(&req, &BTreeSet::new()), Err(SchedError::NoNodes)));
    s.join(NodeDescriptor::new("a", pt(44.9, -93.2), NetType::Wifi, 4.0, 8.0), dead_at + 2.0).unwrap();
    assert!(s.place(&req, &BTreeSet::new()).is_ok());
}

#[test]
fn excluded_nodes_are_skipped() {
    let mut s = SpinnerState::new(SpinnerConfig::default());
    s.join(NodeDescriptor::new("a", pt(44.9, -93.2), NetType::Wifi, 4.0, 8.0), 0.0).unwrap();
    s.join(NodeDescriptor::new("b", pt(44.91, -93.2), NetType::Wifi, 1.0, 1.0), 0.0).unwrap();
    let req = request(pt(44.9, -93.2), 1.0, Vec::new());
    let exclude: BTreeSet<String> = ["a".to_string()].into();
    let (t, _) = s.place(&req, &exclude).unwrap();
    assert_eq!(t.node_id, "b");
    assert!(matches!(s.place(&req, &exclude), Err(SchedError::NoCapacity)));
}
