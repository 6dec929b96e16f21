//! Runs independent jobs (training runs, folds) either on a bounded rayon
//! pool or, without the `parallel` feature, one after another.

/// Applies `f` to every item, preserving order. `jobs` bounds concurrency;
/// 0 means one worker per available core.
#[cfg(feature = "parallel")]
pub fn map_jobs<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if jobs == 1 || items.len() <= 1 {
        return map_jobs_seq(items, f);
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => map_jobs_seq(items, f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_jobs<T, R, F>(items: &[T], _jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_jobs_seq(items, f)
}

/// The sequential path, always available for comparison.
pub fn map_jobs_seq<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}
