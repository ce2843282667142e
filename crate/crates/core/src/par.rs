//! Data-parallel loop helpers.
//!
//! **Requires crate feature `parallel`** for the rayon-backed paths; without
//! it every helper degrades to the equivalent sequential loop. All call sites
//! split work into independent output slices with a fixed accumulation order
//! inside each slice, so enabling or disabling the feature (or changing the
//! thread count) never changes results bitwise.

/// Runs `f` over each `(index, chunk)` of `data` split into `chunk_len`-sized
/// pieces, in parallel when the `parallel` feature is on.
///
/// Chunks are disjoint `&mut` slices: each invocation owns its output region.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    }
}

/// Sequential twin of [`for_each_chunk_mut`], always single-threaded.
/// Exists so benchmarks can compare both paths in one build.
pub fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Maps `f` over `0..n` collecting results in index order, in parallel when
/// the `parallel` feature is on.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_match_sequential() {
        let mut a = vec![0u32; 64];
        let mut b = vec![0u32; 64];
        let f = |i: usize, c: &mut [u32]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u32;
            }
        };
        for_each_chunk_mut(&mut a, 8, f);
        for_each_chunk_mut_seq(&mut b, 8, f);
        assert_eq!(a, b);
    }

    #[test]
    fn map_orders_results_by_index() {
        let v = map_indexed(100, |i| i * i);
        let s = map_indexed_seq(100, |i| i * i);
        assert_eq!(v, s);
        assert_eq!(v[7], 49);
    }
}
