//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they fall back to plain iterators over the same closures.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build runs data-parallel loops on multiple threads.
pub const ENABLED: bool = cfg!(feature = "parallel");

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    items.iter().map(f).collect()
}

/// Sequential counterpart of [`map`], always available.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs `work(worker_index)` on `workers` threads and collects the results in
/// worker order. Falls back to running the workers one after another.
pub fn run_workers<R, F>(workers: usize, work: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build worker pool");
        return pool.install(|| (0..workers).into_par_iter().map(&work).collect());
    }
    (0..workers).map(work).collect()
}
