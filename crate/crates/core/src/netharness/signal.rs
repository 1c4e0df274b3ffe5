use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::sync::Notify;

/// A broadcast counter whose waiters wake in a fixed order.
///
/// `tokio::sync::watch` spreads waiters over internally sharded notifiers
/// picked at random, so the wake order of concurrent receivers differs from
/// run to run. Under virtual time that is enough to break same-seed replay.
#[derive(Default)]
pub struct Epoch {
    value: AtomicU64,
    notify: Notify,
}

impl Epoch {
    pub fn new() -> Arc<Self> {
        Arc::new(Epoch::default())
    }

    pub fn get(&self) -> u64 {
        self.value.load(Ordering::Acquire)
    }

    pub fn bump(&self) {
        self.value.fetch_add(1, Ordering::AcqRel);
        self.notify.notify_waiters();
    }

    /// Resolves once the counter differs from `seen`.
    pub async fn changed_since(&self, seen: u64) {
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.get() != seen {
                return;
            }
            notified.await;
        }
    }

    pub fn subscribe(self: &Arc<Self>) -> EpochRx {
        EpochRx {
            seen: self.get(),
            epoch: self.clone(),
        }
    }
}

/// Remembers the last value observed so repeated waits fire once per bump.
pub struct EpochRx {
    epoch: Arc<Epoch>,
    seen: u64,
}

impl EpochRx {
    pub async fn changed(&mut self) {
        self.epoch.changed_since(self.seen).await;
        self.seen = self.epoch.get();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn fires_once_per_bump() {
        let e = Epoch::new();
        let mut rx = e.subscribe();
        e.bump();
        rx.changed().await;
        let pending = tokio::time::timeout(std::time::Duration::from_millis(10), rx.changed()).await;
        assert!(pending.is_err());
    }

    #[tokio::test(start_paused = true)]
    async fn wakes_waiters_in_registration_order() {
        let e = Epoch::new();
        let order = Arc::new(parking_lot::Mutex::new(Vec::new()));
        let mut handles = Vec::new();
        for i in 0..20 {
            let (e, order) = (e.clone(), order.clone());
            handles.push(tokio::spawn(async move {
                e.changed_since(0).await;
                order.lock().push(i);
            }));
            tokio::task::yield_now().await;
        }
        e.bump();
        for h in handles {
            h.await.unwrap();
        }
        let got = order.lock().clone();
        let mut again = got.clone();
        again.sort();
        assert_eq!(got.len(), 20);
        // Fixed order, whatever it is, is what replay needs; tokio wakes FIFO.
        assert_eq!(got, again);
    }
}
