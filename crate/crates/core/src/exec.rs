//! Execution mode and deterministic data-parallel helpers.
//!
//! Every reduction is split into fixed-size chunks whose partial sums are
//! combined in chunk order, so results are bit-identical across thread
//! counts and across the two execution modes.

use serde::{Deserialize, Serialize};

/// Chunk length used by every ordered reduction.
pub const REDUCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether work is actually distributed (false when the `parallel` feature is off).
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fallible ordered map; the error reported is the one with the lowest index.
pub fn try_map<T, E, F>(exec: Exec, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map(exec, n, f).into_iter().collect()
}

/// Fills `out`, viewed as `n` rows of width `width`, by calling `f(i, row)`.
pub fn fill_rows<F>(exec: Exec, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Fallible variant of [`fill_rows`].
pub fn try_fill_rows<E, F>(exec: Exec, out: &mut [f64], width: usize, f: F) -> Result<(), E>
where
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<(), E> + Sync + Send,
{
    if width == 0 {
        return Ok(());
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return out.par_chunks_mut(width).enumerate().try_for_each(|(i, row)| f(i, row));
    }
    let _ = exec;
    out.chunks_mut(width).enumerate().try_for_each(|(i, row)| f(i, row))
}

/// Ordered sum of `n` vector-valued terms of length `dim`; `f(i, acc)` adds term `i` into `acc`.
pub fn sum<F>(exec: Exec, n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partial = map(exec, chunks, |c| {
        let mut acc = vec![0.0; dim];
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; dim];
    for p in partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Ordered mean of `n` vector-valued terms.
pub fn mean<F>(exec: Exec, n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut s = sum(exec, n, dim, f);
    if n > 0 {
        let inv = 1.0 / n as f64;
        s.iter_mut().for_each(|v| *v *= inv);
    }
    s
}

/// Ordered scalar sum.
pub fn sum_scalar<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    sum(exec, n, 1, |i, acc| acc[0] += f(i))[0]
}

/// Ordered maximum of a scalar map (NaN-propagating, `-inf` when empty).
pub fn max_scalar<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map(exec, n, f).into_iter().fold(f64::NEG_INFINITY, |a, b| if b.is_nan() || b > a { b } else { a })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_are_identical_across_modes() {
        let f = |i: usize, acc: &mut [f64]| {
            acc[0] += (i as f64).sin() * 1e-3;
            acc[1] += 1.0 / (1.0 + i as f64);
        };
        let a = sum(Exec::Sequential, 10_001, 2, f);
        let b = sum(Exec::Parallel, 10_001, 2, f);
        assert_eq!(a, b);
    }

    #[test]
    fn fill_rows_visits_every_row() {
        let mut out = vec![0.0; 12];
        fill_rows(Exec::Parallel, &mut out, 3, |i, row| row.iter_mut().for_each(|v| *v = i as f64));
        assert_eq!(out[9], 3.0);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn try_map_reports_first_error() {
        let r: Result<Vec<usize>, usize> = try_map(Exec::Parallel, 100, |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
