//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper preserves input order and evaluates each item with the same
//! floating-point operations regardless of the worker count, so outputs are
//! identical between `jobs = 1`, `jobs = n` and builds without the
//! `parallel` feature.

/// Requested degree of parallelism. `0` means "use every available core".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jobs(pub usize);

impl Jobs {
    pub const SEQUENTIAL: Jobs = Jobs(1);

    pub fn all() -> Self {
        Jobs(0)
    }

    pub fn is_sequential(self) -> bool {
        !cfg!(feature = "parallel") || self.0 == 1
    }
}

impl Default for Jobs {
    fn default() -> Self {
        Jobs::all()
    }
}

/// Run `f` with `jobs` workers available to every nested parallel helper.
///
/// `Jobs(0)` runs on the ambient pool.
pub fn install<T, F>(jobs: Jobs, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    if jobs.0 > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs.0).build() {
            Ok(pool) => return pool.install(f),
            Err(e) => log::warn!("could not build a {}-thread pool: {e}", jobs.0),
        }
    }
    let _ = jobs;
    f()
}

/// Map `f` over `0..n` and collect in index order.
pub fn map_range<T, F>(jobs: Jobs, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 {
        use rayon::prelude::*;
        return install(jobs, || (0..n).into_par_iter().map(&f).collect());
    }
    let _ = jobs;
    (0..n).map(f).collect()
}

/// Map over a slice, preserving order.
pub fn map_slice<'a, S, T, F>(jobs: Jobs, items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    map_range(jobs, items.len(), |i| f(&items[i]))
}

/// Fill the rows of a row-major buffer in parallel on the ambient pool.
pub(crate) fn fill_rows<F>(buf: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let rows = buf.len() / row_len;
        if rows >= 32 {
            buf.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for (i, row) in buf.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}
