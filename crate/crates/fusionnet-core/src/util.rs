//! Small shared utilities.

/// Runs `f(0..n)` and collects results in index order. With `threads > 1`
/// the indices are chunked across scoped worker threads; results are
/// placed by index, so the output is identical to the sequential run.
pub fn run_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads.min(n));
    std::thread::scope(|scope| {
        for (t, slice) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("worker filled slot")).collect()
}

/// Reads the worker-thread cap from `FUSIONNET_THREADS`; defaults to 1.
pub fn thread_cap() -> usize {
    std::env::var("FUSIONNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let seq = run_indexed(23, 1, |i| i * i);
        let par = run_indexed(23, 4, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(run_indexed(0, 4, |i| i), Vec::<usize>::new());
        assert_eq!(run_indexed(1, 4, |i| i + 1), vec![1]);
    }
}
