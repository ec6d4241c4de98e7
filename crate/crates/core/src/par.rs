//! Data-parallel map with a sequential fallback.
//!
//! Every parallel map here collects into a `Vec` in input order, so any
//! reduction performed afterwards is order-deterministic regardless of the
//! thread count. Without the `parallel` feature, [`Parallelism::Rayon`]
//! silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() && items.len() > 1 {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Fallible map; the first error in input order wins.
pub fn try_map<T, R, E, F>(mode: Parallelism, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map(mode, items, f).into_iter().collect()
}
