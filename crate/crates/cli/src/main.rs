//! `armada`: operator and experiment surface for armada-lite.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use armada_lite::captain::{Captain, CaptainConfig};
use armada_lite::client_sdk::{to_csv, Client, ClientConfig, SelectMode};
use armada_lite::control_plane::{AmRequest, DeployReply, ServiceSpec, ServiceSummary};
use armada_lite::geo::GeoPoint;
use armada_lite::netharness::{real_runtime, virtual_runtime, Clock, Endpoint, SharedTransport, TcpNet};
use armada_lite::proto::{via_beacon, CallError, Target};
use armada_lite::scenario::{
    self, Baseline, Deployment, ScenarioConfig, ScenarioError, TransportKind, BEACON, OPERATOR,
};
use armada_lite::scheduler::{NetType, NodeDescriptor, SpinnerRequest};
use armada_lite::storage::{Cargo, CargoConfig, CargoDescriptor};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "armada", version, about = "Desk-scale edge-cloud platform")]
struct Cli {
    /// Log filter, e.g. `info` or `armada_lite=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Where one-shot commands find a cluster: a live Beacon over TCP, or an
/// in-process emulated cluster booted from `--config`.
#[derive(Args, Clone)]
struct ClusterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "emulated")]
    transport: TransportKind,
    /// Beacon address (`host:port`), required with `--transport tcp`.
    #[arg(long)]
    beacon: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay an experiment config and write CSV and summary outputs.
    RunScenario {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Variant to run; repeat for several. Defaults to the config's list.
        #[arg(long)]
        baseline: Vec<Baseline>,
        #[arg(long, default_value = "emulated")]
        transport: TransportKind,
    },
    /// Boot control plane, nodes and cargos from a config and keep serving.
    Up {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "tcp")]
        transport: TransportKind,
        /// Beacon listen address for TCP.
        #[arg(long, default_value = "127.0.0.1:7700")]
        listen: String,
        /// Skip deploying the config's service.
        #[arg(long)]
        no_deploy: bool,
        /// Stop after this long; runs until interrupted otherwise.
        #[arg(long)]
        for_ms: Option<u64>,
    },
    /// Run a compute node agent that joins a Beacon over TCP.
    Node {
        #[arg(long)]
        beacon: String,
        #[arg(long)]
        id: String,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long, default_value_t = 4.0)]
        cpu: f64,
        #[arg(long, default_value_t = 8192.0)]
        mem: f64,
        #[arg(long)]
        dedicated: bool,
        #[arg(long, default_value = "wifi", value_parser = parse_net_type)]
        net_type: NetType,
        /// Processing-time multiplier relative to the service's reference.
        #[arg(long, default_value_t = 1.0)]
        speed_factor: f64,
    },
    /// Run a storage node that joins a Beacon over TCP.
    Cargo {
        #[arg(long)]
        beacon: String,
        #[arg(long)]
        id: String,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long, default_value_t = 1024.0)]
        capacity_mb: f64,
    },
    /// Deploy a service and print its id.
    Deploy {
        #[command(flatten)]
        cluster: ClusterArgs,
        /// Service spec JSON; defaults to the config's service.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Print a service's status; exits 2 for an unknown service.
    Status {
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long)]
        service: String,
    },
    /// List registered compute nodes.
    Nodes {
        #[command(flatten)]
        cluster: ClusterArgs,
    },
    /// Stream frames to a service and write the per-request CSV.
    DemoClient {
        #[command(flatten)]
        cluster: ClusterArgs,
        /// Service id; defaults to the config's service.
        #[arg(long)]
        service: Option<String>,
        #[arg(long, default_value = "demo")]
        user: String,
        #[arg(long, allow_hyphen_values = true)]
        lat: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        lon: Option<f64>,
        #[arg(long, default_value_t = 10.0)]
        fps: f64,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Pick the geographically nearest candidate instead of probing.
        #[arg(long)]
        geo: bool,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_net_type(s: &str) -> Result<NetType, String> {
    serde_json::from_value(serde_json::Value::String(s.to_uppercase())).map_err(|_| format!("unknown net type {s}"))
}

/// Failure classes mapped to exit codes.
enum Failure {
    User(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::User(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(_) => Failure::User(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<CallError> for Failure {
    fn from(e: CallError) -> Self {
        match e.code() {
            Some(400..=499) => Failure::User(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn user(msg: impl std::fmt::Display) -> Failure {
    Failure::User(anyhow::anyhow!("{msg}"))
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| cli.log.clone().into()))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::User(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn read_spec(path: &Path) -> Result<ServiceSpec, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string()).map_err(Failure::User)?;
    let spec: ServiceSpec = serde_json::from_str(&text)
        .with_context(|| format!("{}: invalid service spec", path.display()))
        .map_err(Failure::User)?;
    spec.validate().map_err(user)?;
    Ok(spec)
}

fn dispatch(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::RunScenario {
            config,
            seed,
            out_dir,
            baseline,
            transport,
        } => {
            let cfg = load_config(&config, seed)?;
            let variants = if baseline.is_empty() { cfg.variants() } else { baseline };
            let mut results = Vec::new();
            for b in variants {
                let mut c = cfg.clone();
                c.baselines = vec![b];
                c.resolve()?;
                let r = scenario::run_on(&c, b, transport)?;
                let s = r.overall();
                println!(
                    "{:<10} requests={} errors={} mean={:.3} median={:.3} p95={:.3}",
                    b.name(),
                    s.requests,
                    s.errors,
                    s.mean_ms,
                    s.median_ms,
                    s.p95_ms
                );
                results.push(r);
            }
            scenario::write_outputs(&cfg, &results, &out_dir)?;
            println!("wrote {}", out_dir.display());
            Ok(())
        }
        Cmd::Up {
            config,
            seed,
            transport,
            listen,
            no_deploy,
            for_ms,
        } => {
            let cfg = load_config(&config, seed)?;
            let rt = match transport {
                TransportKind::Emulated => virtual_runtime(),
                TransportKind::Tcp => real_runtime(),
            };
            rt.block_on(async move {
                let res = cfg.resolve()?;
                let addr = (transport == TransportKind::Tcp).then_some(listen.as_str());
                let dep = Deployment::boot(&cfg, &res, transport, addr).await?;
                dep.await_registration(&cfg, cfg.setup_timeout_ms).await?;
                println!("beacon listening on {}", dep.beacon.address);
                if !no_deploy {
                    dep.deploy(&cfg.service).await?;
                    dep.await_running(&cfg.service.service_id, cfg.setup_timeout_ms).await?;
                    println!("deployed {}", cfg.service.service_id);
                }
                match (for_ms, transport) {
                    (Some(ms), _) => tokio::time::sleep(Duration::from_millis(ms)).await,
                    (None, TransportKind::Emulated) => {
                        tokio::time::sleep(Duration::from_millis(cfg.duration_ms as u64)).await
                    }
                    (None, TransportKind::Tcp) => {
                        tokio::signal::ctrl_c().await.map_err(runtime)?;
                    }
                }
                if let Some(s) = dep.summary(&cfg.service.service_id) {
                    println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
                }
                Ok(())
            })
        }
        Cmd::Node {
            beacon,
            id,
            lat,
            lon,
            cpu,
            mem,
            dedicated,
            net_type,
            speed_factor,
        } => {
            let loc = GeoPoint::new(lat, lon).map_err(user)?;
            let desc = NodeDescriptor::new(&id, loc, net_type, cpu, mem).dedicated(dedicated);
            let mut cfg = CaptainConfig::new(desc, Endpoint::new(BEACON, beacon));
            cfg.speed_factor = speed_factor;
            real_runtime().block_on(async move {
                let net: SharedTransport = TcpNet::new();
                let captain = Captain::new(net, Clock::start(), cfg);
                let ep = captain.start().await.map_err(runtime)?;
                println!("node {id} serving on {}", ep.address);
                tokio::signal::ctrl_c().await.map_err(runtime)
            })
        }
        Cmd::Cargo {
            beacon,
            id,
            lat,
            lon,
            capacity_mb,
        } => {
            let loc = GeoPoint::new(lat, lon).map_err(user)?;
            let cfg = CargoConfig::new(CargoDescriptor::new(&id, loc, capacity_mb), Endpoint::new(BEACON, beacon));
            real_runtime().block_on(async move {
                let net: SharedTransport = TcpNet::new();
                let cargo = Cargo::new(net, cfg);
                let ep = cargo.start().await.map_err(runtime)?;
                println!("cargo {id} serving on {}", ep.address);
                tokio::signal::ctrl_c().await.map_err(runtime)
            })
        }
        Cmd::Deploy { cluster, spec } => {
            let spec = spec.as_deref().map(read_spec).transpose()?;
            with_cluster(cluster, false, move |net, beacon, cfg| async move {
                let spec = match (spec, cfg) {
                    (Some(s), _) => s,
                    (None, Some(c)) => c.service,
                    (None, None) => return Err(user("--spec or --config is required")),
                };
                let r: DeployReply = via_beacon(
                    net.as_ref(),
                    OPERATOR,
                    &beacon,
                    Target::Am,
                    &AmRequest::DeployService(spec),
                    Some(Duration::from_secs(120)),
                )
                .await?;
                println!("{}", r.service_id);
                Ok(())
            })
        }
        Cmd::Status { cluster, service } => with_cluster(cluster, true, move |net, beacon, _| async move {
            let s: ServiceSummary = via_beacon(
                net.as_ref(),
                OPERATOR,
                &beacon,
                Target::Am,
                &AmRequest::ServiceStatus { service_id: service },
                None,
            )
            .await?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            Ok(())
        }),
        Cmd::Nodes { cluster } => with_cluster(cluster, false, |net, beacon, _| async move {
            let nodes: Vec<NodeDescriptor> =
                via_beacon(net.as_ref(), OPERATOR, &beacon, Target::Spinner, &SpinnerRequest::ListNodes, None).await?;
            println!("{:<12} {:>9} {:>9} {:>6} {:>9} {:>5} {:<7}", "node", "lat", "lon", "cpu", "cpu_used", "ded", "state");
            for n in nodes {
                println!(
                    "{:<12} {:>9.4} {:>9.4} {:>6.1} {:>9.2} {:>5} {:<7}",
                    n.node_id,
                    n.location.lat(),
                    n.location.lon(),
                    n.cpu_capacity,
                    n.cpu_used,
                    n.dedicated,
                    serde_json::to_value(n.state).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                );
            }
            Ok(())
        }),
        Cmd::DemoClient {
            cluster,
            service,
            user: user_id,
            lat,
            lon,
            fps,
            frames,
            geo,
            out,
        } => {
            if !(fps > 0.0) {
                return Err(user("--fps must be positive"));
            }
            with_cluster(cluster, true, move |net, beacon, cfg| async move {
                let sid = service
                    .or_else(|| cfg.as_ref().map(|c| c.service.service_id.clone()))
                    .ok_or_else(|| user("--service or --config is required"))?;
                let fallback = cfg.as_ref().map(|c| c.service.locations[0]);
                let loc = match (lat, lon, fallback) {
                    (Some(a), Some(o), _) => GeoPoint::new(a, o).map_err(user)?,
                    (None, None, Some(p)) => p,
                    _ => return Err(user("--lat and --lon are required")),
                };
                let mut c = ClientConfig::new(&user_id, &sid, loc, beacon);
                if geo {
                    c.mode = SelectMode::GeoNearest;
                }
                let client = Client::new(net, Clock::start(), c);
                client.connect().await.map_err(|e| match e {
                    armada_lite::client_sdk::ClientError::Query(q) => Failure::from(q),
                    other => runtime(other),
                })?;
                client.start_reselection();
                let ok = client.stream(frames, fps).await;
                client.stop_reselection();
                let csv = to_csv(&client.requests());
                match out {
                    Some(p) => std::fs::write(&p, csv).with_context(|| p.display().to_string()).map_err(Failure::Runtime)?,
                    None => print!("{csv}"),
                }
                eprintln!("{ok}/{frames} frames served");
                Ok(())
            })
        }
    }
}

/// Runs a one-shot command against a cluster. Over TCP it talks to the
/// given Beacon; emulated, it first boots the config's cluster in process
/// (deploying its service when `deploy` is set) under virtual time.
fn with_cluster<F, Fut>(args: ClusterArgs, deploy: bool, f: F) -> Outcome
where
    F: FnOnce(SharedTransport, Endpoint, Option<ScenarioConfig>) -> Fut,
    Fut: Future<Output = Outcome>,
{
    let cfg = args.config.as_deref().map(|p| load_config(p, args.seed)).transpose()?;
    match args.transport {
        TransportKind::Tcp => {
            let addr = args.beacon.ok_or_else(|| user("--beacon is required with --transport tcp"))?;
            real_runtime().block_on(async move {
                let net: SharedTransport = TcpNet::new();
                f(net, Endpoint::new(BEACON, addr), cfg).await
            })
        }
        TransportKind::Emulated => {
            let cfg = cfg.ok_or_else(|| user("--config is required with the emulated transport"))?;
            virtual_runtime().block_on(async move {
                let res = cfg.resolve()?;
                let dep = Deployment::boot(&cfg, &res, TransportKind::Emulated, None).await?;
                dep.await_registration(&cfg, cfg.setup_timeout_ms).await?;
                if deploy {
                    dep.deploy(&cfg.service).await?;
                    dep.await_running(&cfg.service.service_id, cfg.setup_timeout_ms).await?;
                }
                let shared: SharedTransport = Arc::clone(&dep.shared);
                f(shared, dep.beacon.clone(), Some(cfg)).await
            })
        }
    }
}
