//! Bounded worker pool over independent indexed jobs.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker count from `MFSBI_WORKERS`, else the number of logical cores.
pub fn worker_count() -> usize {
    std::env::var("MFSBI_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluate `f(0..n)` on up to `workers` threads; results keep index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut parts: Vec<Vec<(usize, T)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        out.push((i, f(i)));
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for part in parts.drain(..) {
        for (i, v) in part {
            slots[i] = Some(v);
        }
    }
    slots.into_iter().map(|v| v.expect("every index visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let serial = parallel_map(100, 1, |i| i * i);
        let threaded = parallel_map(100, 4, |i| i * i);
        assert_eq!(serial, threaded);
        assert!(parallel_map(0, 4, |i| i).is_empty());
    }
}
