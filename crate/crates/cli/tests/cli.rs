use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 5,
  "duration_ms": 5000,
  "latency": {"default_ms": 30, "links": [
    {"src": "u1", "dst": "n1", "base_ms": 6},
    {"src": "u1", "dst": "n2", "base_ms": 12}
  ]},
  "nodes": [
    {"node_id": "n1", "lat": 44.97, "lon": -93.23, "cpu": 4, "processing_ms": 20},
    {"node_id": "n2", "lat": 44.98, "lon": -93.26, "cpu": 4, "processing_ms": 20}
  ],
  "service": {
    "service_id": "echo-svc",
    "image": {"name": "echo", "layers": [{"digest": "l1", "pull_ms": 200}], "start_ms": 100},
    "compute_req": {"cpu": 1, "mem": 256},
    "locations": [{"lat": 44.97, "lon": -93.23}],
    "workload": {"handler": "compute-echo", "processing_ms": 20},
    "initial_replicas": 2,
    "autoscale": false
  },
  "clients": [{"user_id": "u1", "lat": 44.97, "lon": -93.23, "fps": 5}]
}"#;

fn config(dir: &Path) -> PathBuf {
    let p = dir.join("cluster.json");
    std::fs::write(&p, CONFIG).unwrap();
    p
}

fn armada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_armada")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn deploy_prints_the_service_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = armada(&["deploy", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "echo-svc");
}

#[test]
fn status_reports_a_deployed_service() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = armada(&["status", "--config", cfg.to_str().unwrap(), "--service", "echo-svc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["spec"]["service_id"], "echo-svc");
    assert_eq!(v["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn status_of_unknown_service_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = armada(&["status", "--config", cfg.to_str().unwrap(), "--service", "nope"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let cases: [&[&str]; 4] = [
        &["nodes"],
        &["nodes", "--transport", "tcp"],
        &["demo-client", "--config", cfg, "--fps", "0"],
        &["deploy", "--config", cfg, "--spec", "/definitely/missing.json"],
    ];
    for args in cases {
        let o = armada(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn nodes_lists_every_captain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = armada(&["nodes", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{out}");
    assert!(rows[0].starts_with("n1") && rows[1].starts_with("n2"));
}

#[test]
fn demo_client_writes_one_row_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = armada(&["demo-client", "--config", cfg.to_str().unwrap(), "--fps", "10", "--frames", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("ts_ms,epoch,endpoint,e2e_ms,server_ms,outcome"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.ends_with(",ok")), "{out}");
    assert!(stderr(&o).contains("100/100 frames served"));

    let csv = dir.path().join("demo.csv");
    let o = armada(&[
        "demo-client",
        "--config",
        cfg.to_str().unwrap(),
        "--frames",
        "5",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 6);
}

#[test]
fn run_scenario_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("out");
    let o = armada(&[
        "run-scenario",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--baseline",
        "armada",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("armada"), "{}", stdout(&o));
    for f in ["armada/client_u1.csv", "armada/requests.csv", "armada/service.json", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["variants"]["armada"]["final_active"]["u1"], "n1");
}
