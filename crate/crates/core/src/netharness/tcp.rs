use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use super::{
    failed, ms_duration, read_frame, write_frame, Endpoint, Handler, LatencyMatrix, Liveness, Mode, NetError,
    NodeStatus, Transport, DEFAULT_TIMEOUT,
};

#[derive(Serialize, Deserialize)]
struct Hello {
    from: String,
}

struct Listening {
    node_id: String,
    closed: watch::Sender<bool>,
    task: JoinHandle<()>,
}

/// Real sockets. Every connection starts with a hello frame naming the
/// sender, then carries request/reply frame pairs. An optional latency
/// matrix injects the same per-leg delays as the emulator (client side).
pub struct TcpNet {
    live: Liveness,
    matrix: Option<Mutex<LatencyMatrix>>,
    rng: Mutex<ChaCha8Rng>,
    listeners: Mutex<BTreeMap<String, Listening>>,
    pool: Mutex<HashMap<(String, String), Vec<TcpStream>>>,
    partitions: Mutex<BTreeSet<(String, String)>>,
    timeout: Duration,
}

impl TcpNet {
    pub fn new() -> Arc<Self> {
        Self::build(None, 0, DEFAULT_TIMEOUT)
    }

    pub fn with_latency(matrix: LatencyMatrix, seed: u64) -> Arc<Self> {
        Self::build(Some(matrix), seed, DEFAULT_TIMEOUT)
    }

    pub fn build(matrix: Option<LatencyMatrix>, seed: u64, timeout: Duration) -> Arc<Self> {
        Arc::new(TcpNet {
            live: Liveness::default(),
            matrix: matrix.map(Mutex::new),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            listeners: Mutex::new(BTreeMap::new()),
            pool: Mutex::new(HashMap::new()),
            partitions: Mutex::new(BTreeSet::new()),
            timeout,
        })
    }

    fn node_of(&self, address: &str) -> String {
        self.listeners
            .lock()
            .get(address)
            .map(|l| l.node_id.clone())
            .unwrap_or_else(|| address.to_string())
    }

    fn legs(&self, src: &str, dst: &str) -> (f64, f64) {
        let Some(m) = &self.matrix else {
            return (0.0, 0.0);
        };
        let (link, back) = {
            let m = m.lock();
            (m.lookup(src, dst), m.lookup(dst, src))
        };
        let mut rng = self.rng.lock();
        let mut leg = |base: f64, jitter: f64| {
            let j = if jitter > 0.0 { rng.gen_range(0.0..jitter) } else { 0.0 };
            (base + j) / 2.0
        };
        (leg(link.base_ms, link.jitter_ms), leg(back.base_ms, back.jitter_ms))
    }

    fn partitioned(&self, a: &str, b: &str) -> bool {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.partitions.lock().contains(&key)
    }

    async fn connect(&self, src: &str, address: &str) -> Result<TcpStream, NetError> {
        let mut stream = TcpStream::connect(address)
            .await
            .map_err(|_| NetError::Refused(address.to_string()))?;
        stream.set_nodelay(true).ok();
        let hello = serde_json::to_vec(&Hello { from: src.to_string() }).expect("hello serializes");
        write_frame(&mut stream, &hello).await?;
        Ok(stream)
    }

    async fn exchange(stream: &mut TcpStream, request: &[u8], node: &str) -> Result<Vec<u8>, NetError> {
        write_frame(stream, request).await?;
        match read_frame(stream).await {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) | Err(_) => Err(NetError::Reset(node.to_string())),
        }
    }

    async fn deliver(&self, src: &str, dst: &Endpoint, request: Vec<u8>) -> Result<Vec<u8>, NetError> {
        if self.live.status(src) == NodeStatus::Down {
            return Err(NetError::SourceDown(src.to_string()));
        }
        let node = self.node_of(&dst.address);
        if self.partitioned(src, &node) {
            std::future::pending::<()>().await;
        }
        let (fwd, ret) = self.legs(src, &node);
        let mut src_down = self.live.subscribe(src);
        let work = async {
            if fwd > 0.0 {
                tokio::time::sleep(ms_duration(fwd)).await;
            }
            let key = (src.to_string(), dst.address.clone());
            let pooled = self.pool.lock().get_mut(&key).and_then(|v| v.pop());
            let (mut stream, reused) = match pooled {
                Some(s) => (s, true),
                None => (self.connect(src, &dst.address).await?, false),
            };
            let reply = match Self::exchange(&mut stream, &request, &node).await {
                Ok(r) => r,
                Err(_) if reused => {
                    // idle pooled socket went stale; one fresh attempt
                    stream = self.connect(src, &dst.address).await?;
                    Self::exchange(&mut stream, &request, &node).await?
                }
                Err(e) => return Err(e),
            };
            self.pool.lock().entry(key).or_default().push(stream);
            if ret > 0.0 {
                tokio::time::sleep(ms_duration(ret)).await;
            }
            Ok(reply)
        };
        tokio::select! {
            biased;
            _ = failed(&mut src_down) => Err(NetError::SourceDown(src.to_string())),
            r = work => r,
        }
    }
}

async fn serve_conn(
    mut stream: TcpStream,
    node: String,
    handler: Arc<dyn Handler>,
    live: Liveness,
    mut closed: watch::Receiver<bool>,
) {
    stream.set_nodelay(true).ok();
    let mut down = live.subscribe(&node);
    let from = match read_frame(&mut stream).await {
        Ok(Some(h)) => match serde_json::from_slice::<Hello>(&h) {
            Ok(h) => h.from,
            Err(_) => return,
        },
        _ => return,
    };
    loop {
        let frame = tokio::select! {
            biased;
            _ = failed(&mut down) => return,
            _ = closed.changed() => return,
            f = read_frame(&mut stream) => f,
        };
        let Ok(Some(request)) = frame else { return };
        if live.status(&node) != NodeStatus::Up {
            return;
        }
        let _inflight = live.enter(&node);
        let reply = tokio::select! {
            biased;
            _ = failed(&mut down) => return,
            r = handler.handle(&from, request) => r,
        };
        if write_frame(&mut stream, &reply).await.is_err() {
            return;
        }
    }
}

#[async_trait]
impl Transport for TcpNet {
    async fn bind(&self, endpoint: Endpoint, handler: Arc<dyn Handler>) -> Result<Endpoint, NetError> {
        let want = if endpoint.address.contains(':') {
            endpoint.address.clone()
        } else {
            "127.0.0.1:0".to_string()
        };
        let listener = TcpListener::bind(&want)
            .await
            .map_err(|e| NetError::Io(format!("bind {want}: {e}")))?;
        let address = listener.local_addr().map_err(|e| NetError::Io(e.to_string()))?.to_string();
        let (closed_tx, closed_rx) = watch::channel(false);
        let node = endpoint.node_id.clone();
        let live = self.live.clone();
        let task = tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else { break };
                if live.status(&node) != NodeStatus::Up {
                    drop(stream);
                    continue;
                }
                tokio::spawn(serve_conn(stream, node.clone(), handler.clone(), live.clone(), closed_rx.clone()));
            }
        });
        self.listeners.lock().insert(
            address.clone(),
            Listening {
                node_id: endpoint.node_id.clone(),
                closed: closed_tx,
                task,
            },
        );
        Ok(Endpoint::new(endpoint.node_id, address))
    }

    fn unbind(&self, address: &str) {
        if let Some(l) = self.listeners.lock().remove(address) {
            l.closed.send_replace(true);
            l.task.abort();
        }
        self.pool.lock().retain(|(_, a), _| a != address);
    }

    async fn call_with_timeout(
        &self,
        src: &str,
        dst: &Endpoint,
        request: Vec<u8>,
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError> {
        match tokio::time::timeout(timeout, self.deliver(src, dst, request)).await {
            Ok(r) => r,
            Err(_) => Err(NetError::Timeout(timeout)),
        }
    }

    fn default_timeout(&self) -> Duration {
        self.timeout
    }

    fn liveness(&self) -> &Liveness {
        &self.live
    }

    fn partition(&self, a: &str, b: &str) {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.partitions.lock().insert(key);
    }

    fn heal(&self, a: &str, b: &str) {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.partitions.lock().remove(&key);
    }

    fn mode(&self) -> Mode {
        Mode::Tcp
    }
}

impl Drop for TcpNet {
    fn drop(&mut self) {
        for (_, l) in std::mem::take(&mut *self.listeners.lock()) {
            l.closed.send_replace(true);
            l.task.abort();
        }
    }
}
