//! Data-parallel map helpers with a sequential fallback.
//!
//! Everything that fans out over documents, queries, or batch examples goes
//! through [`map_ordered`]. With the default `parallel` feature it runs on the
//! rayon global pool; without it (or via [`map_ordered_seq`]) it runs inline.
//! Output order always matches input order, so reductions downstream stay
//! deterministic regardless of how work was scheduled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential variant of [`map_ordered`], kept callable under all feature
/// sets so benches can compare the two paths directly.
pub fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over owned items in parallel, preserving order.
pub fn map_into<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}
