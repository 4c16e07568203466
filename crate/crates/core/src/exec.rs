//! Ordered data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] runs on the rayon
//! pool; without it both variants run sequentially. Results are always
//! returned in input order, so any reduction done by the caller afterwards is
//! bitwise identical between the two modes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Sequential` for one job, otherwise `Parallel` on a global pool of
    /// `jobs` threads (0 keeps the pool's default size).
    pub fn with_jobs(jobs: usize) -> Exec {
        if jobs == 1 {
            return Exec::Sequential;
        }
        #[cfg(feature = "parallel")]
        if jobs > 1 {
            // the global pool can only be built once; later calls keep it
            let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        }
        Exec::Parallel
    }

    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => items.iter().map(f).collect(),
        }
    }

    pub fn try_map<I, O, E, F>(self, items: &[I], f: F) -> Result<Vec<O>, E>
    where
        I: Sync,
        O: Send,
        E: Send,
        F: Fn(&I) -> Result<O, E> + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => items.iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Exec::Sequential.map(&xs, |x| x * x);
        let b = Exec::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        let c: Result<Vec<u64>, ()> = Exec::Parallel.try_map(&xs, |x| Ok(x + 1));
        assert_eq!(c.unwrap()[999], 1000);
        let d: Result<Vec<u64>, u64> =
            Exec::Parallel.try_map(&xs, |&x| if x == 500 { Err(x) } else { Ok(x) });
        assert_eq!(d, Err(500));
    }
}
