use armada_lite::client_sdk::CSV_HEADER;
use armada_lite::scenario::{run, write_outputs, Baseline, ScenarioConfig};

fn cfg() -> ScenarioConfig {
    serde_json::from_value(serde_json::json!({
        "seed": 7,
        "duration_ms": 20000,
        "latency": {"default_ms": 30, "links": [
            {"src": "u1", "dst": "n1", "base_ms": 6, "jitter_ms": 1},
            {"src": "u1", "dst": "n2", "base_ms": 12, "jitter_ms": 1},
            {"src": "u1", "dst": "n3", "base_ms": 20, "jitter_ms": 1}
        ]},
        "nodes": [
            {"node_id": "n1", "lat": 44.97, "lon": -93.23, "cpu": 4, "processing_ms": 20},
            {"node_id": "n2", "lat": 44.98, "lon": -93.26, "cpu": 4, "processing_ms": 20},
            {"node_id": "n3", "lat": 44.95, "lon": -93.20, "cpu": 4, "processing_ms": 20}
        ],
        "service": {
            "service_id": "svc",
            "image": {"name": "echo", "layers": [{"digest": "l1", "pull_ms": 500}], "start_ms": 300},
            "compute_req": {"cpu": 1, "mem": 256},
            "locations": [{"lat": 44.97, "lon": -93.23}],
            "workload": {"handler": "compute-echo", "processing_ms": 20},
            "autoscale": false
        },
        "clients": [{"user_id": "u1", "lat": 44.97, "lon": -93.23, "fps": 5}]
    }))
    .unwrap()
}

#[test]
fn end_to_end_client_lands_on_fastest_node() {
    let r = run(&cfg(), Baseline::Armada).unwrap();
    let c = &r.clients["u1"];
    let s = c.stats();
    eprintln!("{s:?} final={:?} err={:?}", c.final_active, c.error);
    assert!(s.ok > 50, "{s:?}");
    assert_eq!(c.final_active.as_deref(), Some("n1"));
    assert!((s.median_ms - 26.0).abs() < 3.0, "{s:?}");
}

#[test]
fn no_clients_still_writes_headers() {
    let mut c = cfg();
    c.clients.clear();
    c.duration_ms = 3000.0;
    let r = run(&c, Baseline::Armada).unwrap();
    assert!(r.clients.is_empty());
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&c, &[r], dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("armada/requests.csv")).unwrap();
    assert_eq!(csv.trim_end(), format!("user_id,{CSV_HEADER}"));
    let svc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("armada/service.json")).unwrap()).unwrap();
    assert_eq!(svc["status"], "ACTIVE");
}
