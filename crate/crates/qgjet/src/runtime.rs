//! Wall clock and the multi-threaded sample executor.

use std::thread;
use std::time::Instant;

use qgjet_core::train::{Clock, Executor, Sequential};
use qgjet_core::Image;

/// Set to anything but empty or `0` to force single-threaded execution.
pub const DETERMINISTIC_ENV: &str = "QGJET_DETERMINISTIC";

pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Splits the index range into contiguous chunks, one scoped thread each.
/// Every item owns its random stream, so output matches [`Sequential`].
pub struct Threaded {
    pub threads: usize,
}

impl Executor for Threaded {
    fn map_images(&self, n: usize, f: &(dyn Fn(usize) -> Image + Sync)) -> Vec<Image> {
        let threads = self.threads.min(n);
        if threads <= 1 {
            return Sequential.map_images(n, f);
        }
        let chunk = n.div_ceil(threads);
        thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|lo| s.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Single-threaded in deterministic mode, otherwise one thread per core.
pub fn executor() -> Box<dyn Executor> {
    if deterministic_mode() {
        Box::new(Sequential)
    } else {
        Box::new(Threaded { threads: thread::available_parallelism().map_or(1, |n| n.get()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threaded_matches_sequential_order() {
        let f = |i: usize| Image::from_vec(1, 1, 2, vec![i as f32, (i * i) as f32]).unwrap();
        for n in [0, 1, 5, 17] {
            for threads in [1, 2, 3, 8] {
                assert_eq!(Threaded { threads }.map_images(n, &f), Sequential.map_images(n, &f));
            }
        }
    }

    #[test]
    fn clock_advances() {
        let c = StdClock::new();
        let a = c.now_seconds();
        std::thread::sleep(std::time::Duration::from_millis(2));
        assert!(c.now_seconds() > a);
    }
}
