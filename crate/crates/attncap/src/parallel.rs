//! Data-parallel helpers with a bit-identical sequential fallback.
//!
//! Every entry point preserves input order, so parallel and sequential runs
//! produce the same values in the same positions. Reductions over floats are
//! never delegated to rayon's fold/reduce (those split at runtime-dependent
//! points); callers combine the returned per-item or per-chunk results in
//! index order themselves, which keeps summation order fixed.
//!
//! With the `parallel` feature (default) the dispatching functions fan out
//! over rayon; without it they alias the `_seq` versions. The `_seq` versions
//! are always compiled so benchmarks can compare both on the same build.

/// Chunk width for gradient accumulation. Work is split at fixed multiples
/// of this, independent of thread count, so the combine tree never moves.
pub const CHUNK: usize = 8;

/// Apply `f` to every item, preserving order.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Apply `f` to consecutive `chunk`-sized slices (last one may be short),
/// preserving chunk order.
pub fn map_chunks_seq<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
where
    F: Fn(&[T]) -> U,
{
    items.chunks(chunk.max(1)).map(f).collect()
}

/// Apply `f` to every index in `0..n`, preserving order.
pub fn map_indices_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
mod dispatch {
    use rayon::prelude::*;

    pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn map_chunks<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&[T]) -> U + Sync + Send,
    {
        items.par_chunks(chunk.max(1)).map(f).collect()
    }

    pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod dispatch {
    pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        super::map_seq(items, f)
    }

    pub fn map_chunks<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&[T]) -> U + Sync + Send,
    {
        super::map_chunks_seq(items, chunk, f)
    }

    pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        super::map_indices_seq(n, f)
    }
}

pub use dispatch::{map, map_chunks, map_indices};
