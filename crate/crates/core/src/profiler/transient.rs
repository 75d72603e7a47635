//! High-water tracking of transient floating-point buffers.
//!
//! The engine registers every dequantized weight, fp gradient and dequantized
//! momentum it materializes for the lifetime of that buffer. The meter is
//! thread-local, matching the single-training-thread model.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Buffer {
    Weight,
    Gradient,
    Momentum,
}

impl Buffer {
    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransientPeaks {
    pub weight: usize,
    pub gradient: usize,
    pub momentum: usize,
    pub total: usize,
}

#[derive(Default)]
struct Meter {
    live: [usize; 3],
    peak: [usize; 3],
    peak_total: usize,
}

thread_local! {
    static METER: RefCell<Meter> = RefCell::new(Meter::default());
}

/// Guard for one live buffer; releases its bytes on drop.
#[must_use]
pub struct Hold {
    kind: Buffer,
    bytes: usize,
}

pub fn hold(kind: Buffer, bytes: usize) -> Hold {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        let slot = kind.slot();
        m.live[slot] += bytes;
        m.peak[slot] = m.peak[slot].max(m.live[slot]);
        let total = m.live.iter().sum();
        m.peak_total = m.peak_total.max(total);
    });
    Hold { kind, bytes }
}

impl Drop for Hold {
    fn drop(&mut self) {
        METER.with(|m| m.borrow_mut().live[self.kind.slot()] -= self.bytes);
    }
}

/// Clear the peaks (live counts are kept).
pub fn reset() {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.peak = m.live;
        m.peak_total = m.live.iter().sum();
    });
}

pub fn peaks() -> TransientPeaks {
    METER.with(|m| {
        let m = m.borrow();
        TransientPeaks {
            weight: m.peak[0],
            gradient: m.peak[1],
            momentum: m.peak[2],
            total: m.peak_total,
        }
    })
}

pub fn live() -> usize {
    METER.with(|m| m.borrow().live.iter().sum())
}
