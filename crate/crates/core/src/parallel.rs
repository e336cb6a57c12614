//! Batch parallelism capped by the `OPTEQ_THREADS` environment variable.
//!
//! Work is always split into the same fixed chunks and gathered in chunk
//! order, so results do not depend on how many threads ran them.

use std::thread;

/// Columns per chunk when a batch is split for per-sample solves.
pub const CHUNK: usize = 16;

/// Worker threads allowed by `OPTEQ_THREADS`; `0`, unset or unparsable
/// means serial.
pub fn thread_count() -> usize {
    std::env::var("OPTEQ_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

/// `[start, end)` ranges of width `chunk` covering `0..n`.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(|i| (i * chunk, ((i + 1) * chunk).min(n))).collect()
}

/// Applies `f` to every item, on up to `threads` scoped threads, and
/// returns results in item order.
pub fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(threads.min(items.len()));
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|group| {
                let f = &f;
                s.spawn(move || group.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_exactly() {
        assert_eq!(chunk_ranges(0, 16), vec![]);
        assert_eq!(chunk_ranges(5, 2), vec![(0, 2), (2, 4), (4, 5)]);
        assert_eq!(chunk_ranges(32, 16), vec![(0, 16), (16, 32)]);
    }

    #[test]
    fn order_is_independent_of_threads() {
        let items: Vec<u64> = (0..37).collect();
        let serial = map_ordered(&items, 0, |x| x * x + 1);
        for t in [2, 3, 8, 64] {
            assert_eq!(map_ordered(&items, t, |x| x * x + 1), serial);
        }
    }
}
