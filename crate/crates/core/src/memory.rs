//! Live-byte accounting for the gradient engines.
//!
//! Engines register the buffers they hold (network tapes, checkpoints,
//! iterates, gradient accumulators) with [`charge`]. Nothing is counted
//! unless a [`MeterSession`] is active on the current thread, so the
//! counters cost one thread-local read in normal runs. Sessions are
//! per-thread: profile single-threaded.

use std::cell::Cell;
use std::marker::PhantomData;

use crate::error::{Error, Result};

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Releases its bytes when dropped.
#[derive(Debug)]
pub(crate) struct Charge(usize);

impl Clone for Charge {
    fn clone(&self) -> Self {
        charge(self.0)
    }
}

impl Drop for Charge {
    fn drop(&mut self) {
        if self.0 > 0 {
            LIVE.with(|l| l.set(l.get().saturating_sub(self.0)));
        }
    }
}

pub(crate) fn charge(bytes: usize) -> Charge {
    if !ACTIVE.with(Cell::get) {
        return Charge(0);
    }
    let live = LIVE.with(|l| {
        let v = l.get() + bytes;
        l.set(v);
        v
    });
    PEAK.with(|p| p.set(p.get().max(live)));
    Charge(bytes)
}

pub(crate) fn f64_bytes(n: usize) -> usize {
    n * std::mem::size_of::<f64>()
}

/// High-water mark of engine-held bytes on this thread while alive.
#[derive(Debug)]
pub struct MeterSession {
    _thread_bound: PhantomData<*const ()>,
}

impl MeterSession {
    pub fn start() -> Result<Self> {
        if ACTIVE.with(Cell::get) {
            return Err(Error::InvalidConfig(
                "a memory meter session is already active on this thread".into(),
            ));
        }
        ACTIVE.with(|a| a.set(true));
        LIVE.with(|l| l.set(0));
        PEAK.with(|p| p.set(0));
        Ok(Self {
            _thread_bound: PhantomData,
        })
    }

    pub fn peak_bytes(&self) -> usize {
        PEAK.with(Cell::get)
    }

    pub fn live_bytes(&self) -> usize {
        LIVE.with(Cell::get)
    }
}

impl Drop for MeterSession {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(false));
        LIVE.with(|l| l.set(0));
        PEAK.with(|p| p.set(0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_meter_counts_nothing() {
        let c = charge(1024);
        assert_eq!(c.0, 0);
    }

    #[test]
    fn peak_tracks_high_water_mark() {
        let s = MeterSession::start().unwrap();
        assert!(MeterSession::start().is_err());
        {
            let _a = charge(100);
            {
                let _b = charge(50);
                assert_eq!(s.live_bytes(), 150);
            }
            let _c = charge(20);
            assert_eq!(s.live_bytes(), 120);
        }
        assert_eq!(s.live_bytes(), 0);
        assert_eq!(s.peak_bytes(), 150);
    }
}
