//! Data-parallel kernels with a sequential fallback.
//!
//! Every kernel takes an [`Exec`] policy. `Exec::Parallel` uses rayon when the
//! `parallel` feature is enabled and silently degrades to the sequential path
//! otherwise, so callers never need their own `cfg` switches.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of elements handed to one rayon task.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `out[i] = f(a[i])`.
pub fn map1<F>(exec: Exec, a: &[f32], f: F) -> Vec<f32>
where
    F: Fn(f32) -> f32 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && a.len() > CHUNK {
        return a.par_iter().with_min_len(CHUNK).map(|&x| f(x)).collect();
    }
    let _ = exec;
    a.iter().map(|&x| f(x)).collect()
}

/// `out[i] = f(a[i], b[i])`. Slices must have equal length.
pub fn map2<F>(exec: Exec, a: &[f32], b: &[f32], f: F) -> Vec<f32>
where
    F: Fn(f32, f32) -> f32 + Sync + Send,
{
    assert_eq!(a.len(), b.len(), "map2 length mismatch");
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && a.len() > CHUNK {
        return a
            .par_iter()
            .zip(b.par_iter())
            .with_min_len(CHUNK)
            .map(|(&x, &y)| f(x, y))
            .collect();
    }
    let _ = exec;
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Calls `f(row_index, row)` for every `row_len`-sized row of `out`.
pub fn for_each_row<T, F>(exec: Exec, out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && out.len() > CHUNK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `f` over independent work items, preserving order.
pub fn map_items<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && items.len() > 1 {
        return items.par_iter().map(&f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Sum of `f(i)` over `0..n` in f64.
pub fn sum_indexed<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > CHUNK {
        // chunked so the reduction order only depends on `n`, not on thread timing
        let chunks: Vec<f64> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum::<f64>())
            .collect();
        return chunks.into_iter().sum();
    }
    let _ = exec;
    if n > CHUNK {
        return (0..n.div_ceil(CHUNK))
            .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum::<f64>())
            .sum();
    }
    (0..n).map(f).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let a: Vec<f32> = (0..50_000).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..50_000).map(|i| (i as f32 * 0.11).cos()).collect();
        let f = |x: f32, y: f32| 0.3 * x + 0.7 * y;
        assert_eq!(
            map2(Exec::Sequential, &a, &b, f),
            map2(Exec::Parallel, &a, &b, f)
        );
        let s = sum_indexed(Exec::Sequential, a.len(), |i| a[i] as f64);
        let p = sum_indexed(Exec::Parallel, a.len(), |i| a[i] as f64);
        assert_eq!(s.to_bits(), p.to_bits());
    }

    #[test]
    fn rows_visit_every_row_once() {
        let mut buf = vec![0usize; 300 * 64];
        for_each_row(Exec::Parallel, &mut buf, 64, |r, row| {
            row.iter_mut().for_each(|v| *v += r + 1)
        });
        for (r, row) in buf.chunks(64).enumerate() {
            assert!(row.iter().all(|&v| v == r + 1));
        }
    }
}
