//! Processor sharing: `k` concurrent jobs on `c` cores each progress at rate
//! `min(1, c / k)`, so a lone job of `w` ms takes `w` and a steady set of `k`
//! equal jobs takes `w * max(1, k / c)`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::time::Instant;

use crate::netharness::{ms_duration, Epoch};

/// Sleeps are quantized to microseconds; anything below that is done.
const DONE_EPS_MS: f64 = 1e-3;

struct Jobs {
    remaining: BTreeMap<u64, f64>,
    last: Instant,
    next_id: u64,
}

impl Jobs {
    fn advance(&mut self, cores: f64) {
        let now = Instant::now();
        let dt = (now - self.last).as_secs_f64() * 1000.0;
        self.last = now;
        let k = self.remaining.len();
        if k == 0 || dt <= 0.0 {
            return;
        }
        let rate = (cores / k as f64).min(1.0);
        for r in self.remaining.values_mut() {
            *r -= dt * rate;
        }
    }
}

pub struct ProcessorSharing {
    cores: f64,
    jobs: Mutex<Jobs>,
    changed: Arc<Epoch>,
}

struct JobGuard<'a> {
    ps: &'a ProcessorSharing,
    id: u64,
}

impl Drop for JobGuard<'_> {
    fn drop(&mut self) {
        let mut jobs = self.ps.jobs.lock();
        jobs.advance(self.ps.cores);
        if jobs.remaining.remove(&self.id).is_some() {
            self.ps.changed.bump();
        }
    }
}

impl ProcessorSharing {
    pub fn new(cores: f64) -> Arc<Self> {
        Arc::new(ProcessorSharing {
            cores: cores.max(f64::MIN_POSITIVE),
            jobs: Mutex::new(Jobs {
                remaining: BTreeMap::new(),
                last: Instant::now(),
                next_id: 0,
            }),
            changed: Epoch::new(),
        })
    }

    pub fn active(&self) -> usize {
        self.jobs.lock().remaining.len()
    }

    /// Completes `work_ms` of single-core work under the sharing discipline.
    pub async fn run(&self, work_ms: f64) {
        if !(work_ms > 0.0) {
            return;
        }
        let id = {
            let mut jobs = self.jobs.lock();
            jobs.advance(self.cores);
            let id = jobs.next_id;
            jobs.next_id += 1;
            jobs.remaining.insert(id, work_ms);
            id
        };
        self.changed.bump();
        let _guard = JobGuard { ps: self, id };
        loop {
            let seen = self.changed.get();
            let eta = {
                let mut jobs = self.jobs.lock();
                jobs.advance(self.cores);
                let left = jobs.remaining[&id];
                if left <= DONE_EPS_MS {
                    return;
                }
                let k = jobs.remaining.len() as f64;
                left / (self.cores / k).min(1.0)
            };
            tokio::select! {
                biased;
                _ = tokio::time::sleep(ms_duration(eta).max(Duration::from_micros(1))) => {}
                _ = self.changed.changed_since(seen) => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn batch(cores: f64, k: usize, work: f64) -> Vec<f64> {
        let ps = ProcessorSharing::new(cores);
        let t0 = Instant::now();
        let futs = (0..k).map(|_| {
            let ps = ps.clone();
            async move {
                ps.run(work).await;
                t0.elapsed().as_secs_f64() * 1000.0
            }
        });
        futures::future::join_all(futs).await
    }

    #[tokio::test(start_paused = true)]
    async fn lone_job_takes_its_work() {
        assert_eq!(batch(1.0, 1, 30.0).await, vec![30.0]);
    }

    #[tokio::test(start_paused = true)]
    async fn overload_scales_by_k_over_c() {
        for t in batch(4.0, 8, 30.0).await {
            assert!((t - 60.0).abs() < 1.0, "{t}");
        }
        for t in batch(4.0, 3, 30.0).await {
            assert!((t - 30.0).abs() < 1.0, "{t}");
        }
    }

    #[tokio::test(start_paused = true)]
    async fn staggered_arrival() {
        // one core: A alone for 10 ms, then A and B share until A finishes
        // at 10 + 2*20 = 50 ms; B then has 10 ms left alone, finishing at 60.
        let ps = ProcessorSharing::new(1.0);
        let t0 = Instant::now();
        let a = {
            let ps = ps.clone();
            tokio::spawn(async move {
                ps.run(30.0).await;
                t0.elapsed()
            })
        };
        tokio::time::sleep(Duration::from_millis(10)).await;
        ps.run(30.0).await;
        let b = t0.elapsed();
        let a = a.await.unwrap();
        assert_eq!(a, Duration::from_millis(50));
        assert_eq!(b, Duration::from_millis(60));
        assert_eq!(ps.active(), 0);
    }
}
