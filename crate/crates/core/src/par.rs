//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) an [`Executor`] with more than one
//! worker owns a dedicated rayon pool. Without the feature, or with a single
//! worker, every map runs on the calling thread. Results are always returned
//! in input order, so any reduction the caller performs afterwards is
//! independent of the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers == 0` means one worker per available core.
    pub fn new(workers: usize) -> Self {
        let workers = if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        };
        if workers <= 1 {
            return Self::sequential();
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .ok();
            Self { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self { workers: 1 }
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// Applies `f` to every item; output order matches input order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Index-based variant of [`Executor::map`] for `0..n`.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}
