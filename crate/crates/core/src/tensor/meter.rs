//! Thread-local allocation meter for [`Matrix`](super::Matrix) buffers.
//!
//! While [`measure`] runs a closure, every matrix allocated on the calling
//! thread is recorded by shape, and live elements are tracked until the
//! buffer drops. Kernels use it to prove which intermediates they
//! materialize. Nested calls share the outermost frame.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

static NEXT_EPOCH: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Default)]
struct Frame {
    epoch: u32,
    depth: usize,
    live: usize,
    peak: usize,
    shapes: BTreeMap<(usize, usize), usize>,
}

thread_local! {
    static FRAME: RefCell<Option<Frame>> = const { RefCell::new(None) };
}

/// What a metered region allocated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MeterReport {
    /// Largest number of simultaneously live metered elements.
    pub peak_live_elements: usize,
    /// Allocation count keyed by `(rows, cols)`.
    pub shapes: BTreeMap<(usize, usize), usize>,
}

impl MeterReport {
    pub fn allocations(&self) -> usize {
        self.shapes.values().sum()
    }

    pub fn count_shape(&self, rows: usize, cols: usize) -> usize {
        self.shapes.get(&(rows, cols)).copied().unwrap_or(0)
    }

    /// Element count of the largest single buffer.
    pub fn largest_allocation(&self) -> usize {
        self.shapes.keys().map(|(r, c)| r * c).max().unwrap_or(0)
    }

    /// Folds another report in, keeping the larger peak and summing counts.
    pub fn absorb(&mut self, other: &MeterReport) {
        self.peak_live_elements = self.peak_live_elements.max(other.peak_live_elements);
        for (shape, n) in &other.shapes {
            *self.shapes.entry(*shape).or_default() += n;
        }
    }
}

/// Runs `f` with the meter active and returns its result plus the report.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MeterReport) {
    let outer = FRAME.with(|cell| {
        let mut slot = cell.borrow_mut();
        match slot.as_mut() {
            Some(frame) => {
                frame.depth += 1;
                true
            }
            None => {
                *slot = Some(Frame {
                    epoch: NEXT_EPOCH.fetch_add(1, Ordering::Relaxed).max(1),
                    ..Frame::default()
                });
                false
            }
        }
    });
    let out = f();
    let report = FRAME.with(|cell| {
        let mut slot = cell.borrow_mut();
        let frame = slot.as_mut().expect("meter frame");
        let report = MeterReport {
            peak_live_elements: frame.peak,
            shapes: frame.shapes.clone(),
        };
        if outer {
            frame.depth -= 1;
        } else {
            *slot = None;
        }
        report
    });
    (out, report)
}

pub(crate) fn record_alloc(rows: usize, cols: usize) -> u32 {
    FRAME.with(|cell| match cell.borrow_mut().as_mut() {
        Some(frame) => {
            frame.live += rows * cols;
            frame.peak = frame.peak.max(frame.live);
            *frame.shapes.entry((rows, cols)).or_default() += 1;
            frame.epoch
        }
        None => 0,
    })
}

pub(crate) fn record_free(epoch: u32, elements: usize) {
    // try_with: drops may run during thread-local teardown.
    let _ = FRAME.try_with(|cell| {
        if let Ok(mut slot) = cell.try_borrow_mut() {
            if let Some(frame) = slot.as_mut() {
                if frame.epoch == epoch {
                    frame.live = frame.live.saturating_sub(elements);
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn tracks_live_and_peak() {
        let outside = Matrix::<f64>::zeros(10, 10);
        let (kept, report) = measure(|| {
            drop(outside);
            let a = Matrix::<f64>::zeros(2, 3);
            let b = Matrix::<f64>::zeros(4, 4);
            drop(b);
            let c = Matrix::<f64>::zeros(4, 4);
            drop(a);
            c
        });
        assert_eq!(report.peak_live_elements, 22);
        assert_eq!(report.count_shape(4, 4), 2);
        assert_eq!(report.count_shape(10, 10), 0);
        assert_eq!(report.largest_allocation(), 16);
        drop(kept);
        let (_, empty) = measure(|| ());
        assert_eq!(empty, MeterReport::default());
    }

    #[test]
    fn nested_calls_share_frame() {
        let (_, outer) = measure(|| {
            let _a = Matrix::<f64>::zeros(1, 5);
            let (_, inner) = measure(|| Matrix::<f64>::zeros(1, 3));
            assert_eq!(inner.allocations(), 2);
        });
        assert_eq!(outer.allocations(), 2);
        assert_eq!(outer.peak_live_elements, 8);
    }
}
