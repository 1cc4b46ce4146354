//! Counting limit on concurrent outbound requests.

use parking_lot::{Condvar, Mutex};

pub struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock();
        while *active >= self.max {
            self.freed.wait(&mut active);
        }
        *active += 1;
        Permit { limit: self }
    }

    #[cfg(test)]
    pub fn active(&self) -> usize {
        *self.active.lock()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limit.active.lock() -= 1;
        self.limit.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn never_exceeds_max() {
        let limit = Arc::new(InFlightLimit::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, peak) = (limit.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = limit.acquire();
                    peak.fetch_max(limit.active(), Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limit.active(), 0);
    }
}
