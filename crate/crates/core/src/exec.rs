//! Data-parallel helpers with a sequential fallback.
//!
//! All helpers collect results by work-item index, so any later reduction runs
//! in a fixed order and the output is the same for every worker count.

/// Evaluates `f(i)` for `i in 0..n` and returns the results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Fills `out[i] = f(i)` in place.
#[cfg(feature = "parallel")]
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
}

#[cfg(not(feature = "parallel"))]
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    out.iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
}

/// Sequential version of [`map_range`], always available. Used by the
/// benchmarks as the baseline and by callers that are already inside a
/// parallel region.
pub fn map_range_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Number of worker threads that [`map_range`] will use.
pub fn current_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` with at most `workers` threads. Without the `parallel` feature
/// this simply calls `f`.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("failed to build thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_keeps_index_order() {
        let v = map_range(1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
        assert_eq!(v, map_range_seq(1000, |i| i * i));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let f = |i: usize| ((i as f64).sin() * 1e6).fract();
        let a = with_workers(1, || map_range(5000, f));
        let b = with_workers(4, || map_range(5000, f));
        assert_eq!(a, b);
    }
}
