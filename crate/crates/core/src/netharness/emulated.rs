use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    decode_frame, encode_frame, failed, ms_duration, Clock, Endpoint, Handler, LatencyMatrix, Liveness, Mode, NetError,
    NodeStatus, Transport, DEFAULT_TIMEOUT,
};

/// One message send as seen by the emulator.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub t_ms: f64,
    pub src: String,
    pub dst: String,
    pub address: String,
    pub kind: String,
    pub forward_ms: f64,
    pub return_ms: f64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.3},{},{},{},{},{:.6},{:.6}",
            self.t_ms, self.src, self.dst, self.address, self.kind, self.forward_ms, self.return_ms
        )
    }
}

#[derive(Clone)]
struct Bound {
    node_id: String,
    handler: Arc<dyn Handler>,
}

/// In-process network. Delivery of each leg is delayed per the latency
/// matrix using a seeded RNG; node failures reset exchanges in flight.
pub struct EmulatedNet {
    matrix: Mutex<LatencyMatrix>,
    rng: Mutex<ChaCha8Rng>,
    live: Liveness,
    endpoints: Mutex<BTreeMap<String, Bound>>,
    partitions: Mutex<BTreeSet<(String, String)>>,
    trace: Mutex<Option<Vec<TraceEntry>>>,
    clock: Clock,
    timeout: Duration,
}

impl EmulatedNet {
    pub fn new(matrix: LatencyMatrix, seed: u64) -> Arc<Self> {
        Self::with_timeout(matrix, seed, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(matrix: LatencyMatrix, seed: u64, timeout: Duration) -> Arc<Self> {
        Arc::new(EmulatedNet {
            matrix: Mutex::new(matrix),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            live: Liveness::default(),
            endpoints: Mutex::new(BTreeMap::new()),
            partitions: Mutex::new(BTreeSet::new()),
            trace: Mutex::new(None),
            clock: Clock::start(),
            timeout,
        })
    }

    pub fn enable_trace(&self) {
        self.trace.lock().get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.trace.lock().clone().unwrap_or_default()
    }

    pub fn set_link(&self, src: &str, dst: &str, base_ms: f64, jitter_ms: f64) -> Result<(), NetError> {
        self.matrix.lock().set(src, dst, base_ms, jitter_ms)
    }

    pub fn matrix(&self) -> LatencyMatrix {
        self.matrix.lock().clone()
    }

    fn sample_legs(&self, src: &str, dst: &str) -> (f64, f64) {
        let link = self.matrix.lock().lookup(src, dst);
        let back = self.matrix.lock().lookup(dst, src);
        let mut rng = self.rng.lock();
        // The timer fires on whole milliseconds and would round every leg up;
        // stochastic rounding keeps the per-leg mean exact.
        let mut leg = |base: f64, jitter: f64| {
            let j = if jitter > 0.0 { rng.gen_range(0.0..jitter) } else { 0.0 };
            let d = (base + j) / 2.0;
            let floor = d.floor();
            if rng.gen::<f64>() < d - floor {
                floor + 1.0
            } else {
                floor
            }
        };
        let fwd = leg(link.base_ms, link.jitter_ms);
        let ret = leg(back.base_ms, back.jitter_ms);
        (fwd, ret)
    }

    fn partitioned(&self, a: &str, b: &str) -> bool {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.partitions.lock().contains(&key)
    }

    async fn deliver(&self, src: &str, dst: &Endpoint, request: Vec<u8>) -> Result<Vec<u8>, NetError> {
        if self.live.status(src) == NodeStatus::Down {
            return Err(NetError::SourceDown(src.to_string()));
        }
        let bound = self
            .endpoints
            .lock()
            .get(&dst.address)
            .cloned()
            .ok_or_else(|| NetError::Refused(dst.address.clone()))?;
        let node = bound.node_id.clone();
        if self.live.status(&node) != NodeStatus::Up {
            return Err(NetError::Refused(dst.address.clone()));
        }
        if self.partitioned(src, &node) {
            std::future::pending::<()>().await;
        }
        let (fwd, ret) = self.sample_legs(src, &node);
        if let Some(trace) = self.trace.lock().as_mut() {
            trace.push(TraceEntry {
                t_ms: self.clock.now_ms(),
                src: src.to_string(),
                dst: node.clone(),
                address: dst.address.clone(),
                kind: message_kind(&request),
                forward_ms: fwd,
                return_ms: ret,
            });
        }
        let mut dst_down = self.live.subscribe(&node);
        let mut src_down = self.live.subscribe(src);
        let _inflight = self.live.enter(&node);
        let exchange = async {
            tokio::time::sleep(ms_duration(fwd)).await;
            let frame = encode_frame(&request);
            let body = decode_frame(&frame)?.to_vec();
            let reply = bound.handler.handle(src, body).await;
            tokio::time::sleep(ms_duration(ret)).await;
            let frame = encode_frame(&reply);
            Ok(decode_frame(&frame)?.to_vec())
        };
        tokio::select! {
            biased;
            _ = failed(&mut dst_down) => Err(NetError::Reset(node)),
            _ = failed(&mut src_down) => Err(NetError::SourceDown(src.to_string())),
            r = exchange => r,
        }
    }
}

/// Best-effort label for traces: the `type` (RPC) or `op` (workload) field.
fn message_kind(body: &[u8]) -> String {
    match serde_json::from_slice::<serde_json::Value>(body) {
        Ok(v) => v
            .get("type")
            .or_else(|| v.get("op"))
            .and_then(|t| t.as_str())
            .unwrap_or("-")
            .to_string(),
        Err(_) => "-".to_string(),
    }
}

#[async_trait]
impl Transport for EmulatedNet {
    async fn bind(&self, endpoint: Endpoint, handler: Arc<dyn Handler>) -> Result<Endpoint, NetError> {
        let mut eps = self.endpoints.lock();
        if eps.contains_key(&endpoint.address) {
            return Err(NetError::AddressInUse(endpoint.address));
        }
        eps.insert(
            endpoint.address.clone(),
            Bound {
                node_id: endpoint.node_id.clone(),
                handler,
            },
        );
        Ok(endpoint)
    }

    fn unbind(&self, address: &str) {
        self.endpoints.lock().remove(address);
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
        Mode::Emulated
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::time::Instant;

    struct Echo {
        work_ms: u64,
    }

    #[async_trait]
    impl Handler for Echo {
        async fn handle(&self, _from: &str, request: Vec<u8>) -> Vec<u8> {
            tokio::time::sleep(Duration::from_millis(self.work_ms)).await;
            request
        }
    }

    async fn echo_net(matrix: LatencyMatrix, seed: u64, work_ms: u64) -> Arc<EmulatedNet> {
        let net = EmulatedNet::new(matrix, seed);
        net.bind(Endpoint::node("srv"), Arc::new(Echo { work_ms })).await.unwrap();
        net
    }

    #[tokio::test(start_paused = true)]
    async fn rtt_is_base() {
        let net = echo_net(LatencyMatrix::default().with("cli", "srv", 40.0), 1, 0).await;
        let t = Instant::now();
        let reply = net.call("cli", &Endpoint::node("srv"), b"ping".to_vec()).await.unwrap();
        assert_eq!(reply, b"ping");
        assert_eq!(t.elapsed(), Duration::from_millis(40));
    }

    #[tokio::test(start_paused = true)]
    async fn mean_rtt_within_five_percent() {
        let net = echo_net(LatencyMatrix::default().with("cli", "srv", 40.0), 2, 0).await;
        let mut total = 0.0;
        for _ in 0..1000 {
            let t = Instant::now();
            net.call("cli", &Endpoint::node("srv"), b"x".to_vec()).await.unwrap();
            total += t.elapsed().as_secs_f64() * 1000.0;
        }
        let mean = total / 1000.0;
        assert!((mean - 40.0).abs() / 40.0 < 0.05, "mean {mean}");
    }

    #[tokio::test(start_paused = true)]
    async fn failed_destination_errors_immediately() {
        let net = echo_net(LatencyMatrix::default().with("cli", "srv", 40.0), 3, 0).await;
        net.liveness().fail("srv");
        let t = Instant::now();
        let err = net.call("cli", &Endpoint::node("srv"), vec![]).await.unwrap_err();
        assert_eq!(err, NetError::Refused("srv".into()));
        assert_eq!(t.elapsed(), Duration::ZERO);
    }

    #[tokio::test(start_paused = true)]
    async fn fail_mid_flight_resets() {
        let net = echo_net(LatencyMatrix::default().with("cli", "srv", 40.0), 4, 500).await;
        let n2 = net.clone();
        tokio::spawn(async move {
            tokio::time::sleep(Duration::from_millis(100)).await;
            n2.liveness().fail("srv");
        });
        let t = Instant::now();
        let err = net.call("cli", &Endpoint::node("srv"), vec![]).await.unwrap_err();
        assert_eq!(err, NetError::Reset("srv".into()));
        assert_eq!(t.elapsed(), Duration::from_millis(100));
    }

    #[tokio::test(start_paused = true)]
    async fn leave_drains_in_flight() {
        let net = echo_net(LatencyMatrix::default(), 5, 300).await;
        let n2 = net.clone();
        let inflight = tokio::spawn(async move { n2.call("cli", &Endpoint::node("srv"), b"a".to_vec()).await });
        tokio::time::sleep(Duration::from_millis(10)).await;
        net.liveness().leave("srv");
        assert!(net.call("cli", &Endpoint::node("srv"), vec![]).await.is_err());
        assert_eq!(inflight.await.unwrap().unwrap(), b"a");
        assert_eq!(net.liveness().status("srv"), NodeStatus::Down);
    }

    #[tokio::test(start_paused = true)]
    async fn partition_times_out() {
        let net = echo_net(LatencyMatrix::default(), 6, 0).await;
        net.partition("srv", "cli");
        let err = net
            .call_with_timeout("cli", &Endpoint::node("srv"), vec![], Duration::from_millis(250))
            .await
            .unwrap_err();
        assert!(err.is_timeout());
        net.heal("cli", "srv");
        assert!(net.call("cli", &Endpoint::node("srv"), vec![]).await.is_ok());
    }

    async fn jittered_run(seed: u64) -> Vec<Duration> {
        let mut m = LatencyMatrix::default();
        m.set("cli", "srv", 30.0, 20.0).unwrap();
        let net = echo_net(m, seed, 0).await;
        let mut out = Vec::new();
        for _ in 0..50 {
            let t = Instant::now();
            net.call("cli", &Endpoint::node("srv"), vec![]).await.unwrap();
            out.push(t.elapsed());
        }
        out
    }

    #[test]
    fn seeded_replay_is_identical() {
        let a = crate::netharness::virtual_runtime().block_on(jittered_run(42));
        let b = crate::netharness::virtual_runtime().block_on(jittered_run(42));
        let c = crate::netharness::virtual_runtime().block_on(jittered_run(43));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|d| *d >= Duration::from_millis(30) && *d <= Duration::from_millis(52)));
    }

    #[tokio::test(start_paused = true)]
    async fn fractional_legs_are_unbiased() {
        let mut m = LatencyMatrix::default();
        m.set("cli", "srv", 3.0, 0.0).unwrap();
        let net = echo_net(m, 9, 0).await;
        let mut total = Duration::ZERO;
        for _ in 0..1000 {
            let t = Instant::now();
            net.call("cli", &Endpoint::node("srv"), vec![]).await.unwrap();
            total += t.elapsed();
        }
        let mean = total.as_secs_f64() * 1000.0 / 1000.0;
        assert!((mean - 3.0).abs() < 0.15, "mean {mean}");
    }
}
