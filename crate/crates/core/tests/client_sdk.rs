use std::sync::Arc;
use std::time::Duration;

use armada_lite::captain::Op;
use armada_lite::client_sdk::{argmin, to_csv, Client, ClientError, Outcome, ProbeResult, RequestLog, CSV_HEADER};
use armada_lite::netharness::{virtual_runtime, Endpoint, Transport};
use armada_lite::scenario::{Baseline, ClientSeed, Deployment, ScenarioConfig, TransportKind};
use proptest::prelude::*;
use serde_json::{json, Value};

fn probe(i: usize, median: f64) -> ProbeResult {
    ProbeResult {
        task_id: format!("t{i}"),
        endpoint: Endpoint::node(format!("n{i}")),
        samples_ms: vec![median],
        median_ms: median,
        measured_at_ms: 0.0,
    }
}

proptest! {
    #[test]
    fn argmin_takes_the_earliest_minimum(medians in prop::collection::vec(prop::sample::select(vec![5.0, 7.5, 10.0, 12.0]), 0..12)) {
        let results: Vec<ProbeResult> = medians.iter().enumerate().map(|(i, m)| probe(i, *m)).collect();
        match argmin(&results) {
            None => prop_assert!(medians.is_empty()),
            Some(i) => {
                prop_assert!(medians.iter().all(|m| medians[i] <= *m));
                prop_assert!(medians[..i].iter().all(|m| *m > medians[i]));
            }
        }
    }
}

#[test]
fn csv_has_one_line_per_request() {
    let rows: Vec<RequestLog> = (0..3)
        .map(|i| RequestLog {
            ts_ms: i as f64 * 100.0,
            epoch: 1,
            endpoint: "n1".into(),
            e2e_ms: 25.5,
            server_ms: 20.0,
            outcome: if i == 2 { Outcome::Failover } else { Outcome::Ok },
        })
        .collect();
    let text = to_csv(&rows);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], "200.000,1,n1,25.500,20.000,failover");
    assert_eq!(to_csv(&[]).lines().count(), 1);
}

// ---------------------------------------------------------------- against a live deployment

/// Three replicas at round trips of 6, 12 and 20 ms from the user, each
/// taking 20 ms per frame.
fn three_nodes() -> ScenarioConfig {
    serde_json::from_value(json!({
        "seed": 3,
        "duration_ms": 1000,
        "latency": {"default_ms": 30, "links": [
            {"src": "u1", "dst": "n1", "base_ms": 6},
            {"src": "u1", "dst": "n2", "base_ms": 12},
            {"src": "u1", "dst": "n3", "base_ms": 20}
        ]},
        "nodes": [
            {"node_id": "n1", "lat": 44.97, "lon": -93.23, "cpu": 4, "processing_ms": 20},
            {"node_id": "n2", "lat": 44.98, "lon": -93.26, "cpu": 4, "processing_ms": 20},
            {"node_id": "n3", "lat": 44.95, "lon": -93.20, "cpu": 4, "processing_ms": 20}
        ],
        "service": {
            "service_id": "svc",
            "image": {"name": "echo", "layers": [], "start_ms": 100},
            "compute_req": {"cpu": 1, "mem": 256},
            "locations": [{"lat": 44.97, "lon": -93.23}],
            "workload": {"handler": "compute-echo", "processing_ms": 20},
            "autoscale": false
        },
        "clients": []
    }))
    .unwrap()
}

async fn deployed(cfg: &ScenarioConfig) -> Deployment {
    let res = cfg.resolve().unwrap();
    let dep = Deployment::boot(cfg, &res, TransportKind::Emulated, None).await.unwrap();
    dep.await_registration(cfg, 30_000.0).await.unwrap();
    dep.deploy(&cfg.service).await.unwrap();
    dep.await_running("svc", 30_000.0).await.unwrap();
    // let every replica come up and be seen by the AM
    tokio::time::sleep(Duration::from_secs(5)).await;
    dep
}

fn user(dep: &Deployment, cfg: &ScenarioConfig, baseline: Baseline) -> Arc<Client> {
    dep.client(&ClientSeed::new("u1", 44.97, -93.23), cfg, baseline, dep.clock)
}

fn node_of(ep: &Endpoint) -> &str {
    &ep.node_id
}

#[test]
fn connect_orders_standbys_by_probe() {
    let cfg = three_nodes();
    virtual_runtime().block_on(async {
        let dep = deployed(&cfg).await;
        let c = user(&dep, &cfg, Baseline::Armada);
        let set = c.connect().await.unwrap();
        assert_eq!(set.epoch, 1);
        assert_eq!(node_of(&set.active.endpoint), "n1");
        let standbys: Vec<&str> = set.standbys.iter().map(|s| node_of(&s.endpoint)).collect();
        assert_eq!(standbys, vec!["n2", "n3"]);
        let medians: Vec<f64> = c.last_probes().iter().map(|p| p.median_ms).collect();
        assert_eq!(medians, vec![26.0, 32.0, 40.0]);

        let served = c.offload(Op::Infer, Value::Null).await.unwrap();
        assert_eq!(served.e2e_ms, 26.0);
        assert_eq!(served.failovers, 0);
    });
}

#[test]
fn reselection_respects_the_switch_margin() {
    let cfg = three_nodes();
    virtual_runtime().block_on(async {
        let dep = deployed(&cfg).await;
        let net = dep.emulated.clone().unwrap();
        let c = user(&dep, &cfg, Baseline::Armada);
        c.connect().await.unwrap();

        // 24 ms is under 10% better than the incumbent's 26: stay put
        net.set_link("u1", "n2", 4.0, 0.0).unwrap();
        let set = c.reselect_tick().await.unwrap();
        assert_eq!(node_of(&set.active.endpoint), "n1");
        assert_eq!(set.epoch, 2);

        // 21 ms clears the margin
        net.set_link("u1", "n3", 1.0, 0.0).unwrap();
        let set = c.reselect_tick().await.unwrap();
        assert_eq!(node_of(&set.active.endpoint), "n3");
        let summary = dep.summary("svc").unwrap();
        assert_eq!(summary.users["u1"].selected.as_deref(), Some(set.active.task_id.as_str()));
    });
}

#[test]
fn failed_active_fails_over_to_the_next_standby() {
    let cfg = three_nodes();
    virtual_runtime().block_on(async {
        let dep = deployed(&cfg).await;
        let net = dep.emulated.clone().unwrap();
        let c = user(&dep, &cfg, Baseline::Armada);
        c.connect().await.unwrap();
        net.liveness().fail("n1");

        let served = c.offload(Op::Infer, Value::Null).await.unwrap();
        assert_eq!(node_of(&served.endpoint), "n2");
        assert_eq!(served.failovers, 1);
        let served = c.offload(Op::Infer, Value::Null).await.unwrap();
        assert_eq!(served.failovers, 0);
        assert_eq!(served.e2e_ms, 32.0);

        let outcomes: Vec<Outcome> = c.requests().iter().map(|r| r.outcome).collect();
        assert_eq!(outcomes, vec![Outcome::Failover, Outcome::Ok]);
        assert_eq!(c.connection_set().unwrap().standbys.len(), 1);
    });
}

#[test]
fn losing_every_replica_is_an_error() {
    let cfg = three_nodes();
    virtual_runtime().block_on(async {
        let dep = deployed(&cfg).await;
        let net = dep.emulated.clone().unwrap();
        let c = user(&dep, &cfg, Baseline::Armada);
        c.connect().await.unwrap();
        for n in ["n1", "n2", "n3"] {
            net.liveness().fail(n);
        }
        let err = c.offload(Op::Infer, Value::Null).await.unwrap_err();
        assert!(matches!(err, ClientError::Exhausted(_) | ClientError::Query(_) | ClientError::NoCandidates), "{err}");
        assert_eq!(c.requests().last().unwrap().outcome, Outcome::Error);
    });
}

#[test]
fn geo_mode_takes_the_nearest_without_probing() {
    let cfg = three_nodes();
    virtual_runtime().block_on(async {
        let dep = deployed(&cfg).await;
        let c = dep.client(&ClientSeed::new("u1", 44.951, -93.201), &cfg, Baseline::Geo, dep.clock);
        let set = c.connect().await.unwrap();
        assert_eq!(node_of(&set.active.endpoint), "n3");
        assert!(c.last_probes().is_empty());
    });
}
