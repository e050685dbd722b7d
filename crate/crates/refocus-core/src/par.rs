//! Order-preserving data-parallel helpers.
//!
//! The hot loops of this crate (per-sample gradients in a batch, window
//! sweeps during evaluation, verification grids) are embarrassingly parallel:
//! each index is computed independently and results are combined in index
//! order afterwards. Because combination order is fixed, output is
//! bit-identical whether the map runs on one thread or many.
//!
//! With the `parallel` feature (default) the maps run on rayon; without it
//! they run sequentially. [`map_range_seq`] is always available so benchmarks
//! can compare both code paths in a single build.

/// Map `f` over `0..n`, collecting results in index order.
///
/// `parallel = false` forces the sequential path even when the `parallel`
/// feature is enabled; callers that don't care pass `true`.
pub fn map_range<U, F>(parallel: bool, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    map_range_seq(n, f)
}

/// Sequential reference implementation of [`map_range`].
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let f = |i: usize| (i as f64).sin() * 1e3 + (i as f64).sqrt();
        let seq = map_range_seq(1000, f);
        let par = map_range(true, 1000, f);
        for (a, b) in seq.iter().zip(par.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
