//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) the maps fan out over the global
//! rayon pool; without it, or when the pool has a single thread, they run as
//! plain loops. Results are always collected in index order and every work
//! item derives its own RNG stream, so the output is identical in all three
//! configurations.

/// Maps `f` over `0..len`, in parallel when a multi-threaded pool is active.
pub fn maybe_par_map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if rayon::current_num_threads() > 1 && len > 1 {
            return (0..len).into_par_iter().map(&f).collect();
        }
    }
    (0..len).map(f).collect()
}

/// Fallible version of [`maybe_par_map`]; returns the first error encountered.
pub fn try_maybe_par_map<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if rayon::current_num_threads() > 1 && len > 1 {
            return (0..len).into_par_iter().map(&f).collect();
        }
    }
    (0..len).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let v = maybe_par_map(1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }

    #[test]
    fn propagates_errors() {
        let r: Result<Vec<usize>, &str> =
            try_maybe_par_map(10, |i| if i == 7 { Err("boom") } else { Ok(i) });
        assert_eq!(r.unwrap_err(), "boom");
    }
}
