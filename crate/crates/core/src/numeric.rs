//! Summation helpers with a fixed reduction order.
//!
//! Long log-likelihood sums (n up to 5e4) are accumulated in fixed-size
//! chunks with Neumaier compensation, and the chunk partials are combined
//! along a fixed binary tree. The tree shape depends only on the input
//! length, so sequential and parallel evaluation give bit-identical results.

use rayon::prelude::*;

/// Length of the leaves of the reduction tree.
pub const CHUNK: usize = 256;

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of a slice.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<CompensatedSum>().value()
}

fn tree_combine<T, F>(mut parts: Vec<T>, combine: &F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Evaluates `leaf` on every chunk `[start, end)` of `0..len` and combines
/// the results along a fixed binary tree.
///
/// With `parallel` set the leaves run on the rayon pool; the result is
/// bit-identical to the sequential path.
pub fn tree_reduce<T, L, F>(len: usize, parallel: bool, identity: T, leaf: L, combine: F) -> T
where
    T: Send,
    L: Fn(usize, usize) -> T + Sync,
    F: Fn(T, T) -> T,
{
    let n_chunks = len.div_ceil(CHUNK);
    let bounds = |c: usize| (c * CHUNK, ((c + 1) * CHUNK).min(len));
    let parts: Vec<T> = if parallel && n_chunks > 1 {
        (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let (s, e) = bounds(c);
                leaf(s, e)
            })
            .collect()
    } else {
        (0..n_chunks)
            .map(|c| {
                let (s, e) = bounds(c);
                leaf(s, e)
            })
            .collect()
    };
    tree_combine(parts, &combine).unwrap_or(identity)
}

/// Fixed-order sum of `term(j)` over `0..len`.
pub fn tree_sum<F>(len: usize, parallel: bool, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    tree_reduce(
        len,
        parallel,
        0.0,
        |s, e| (s..e).map(&term).collect::<CompensatedSum>().value(),
        |a, b| a + b,
    )
}

/// Median of a slice of finite values (`NaN` on empty input).
pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile (type 7), `NaN` on empty input.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_recovers_small_terms() {
        let mut xs = vec![1.0e16];
        xs.extend(std::iter::repeat_n(1.0, 1000));
        xs.push(-1.0e16);
        assert_eq!(compensated_sum(&xs), 1000.0);
    }

    #[test]
    fn tree_sum_parallel_is_bit_identical() {
        let f = |j: usize| ((j as f64) * 0.37).sin() / (1.0 + j as f64);
        for len in [0, 1, 255, 256, 257, 10_000, 50_001] {
            let a = tree_sum(len, false, f);
            let b = tree_sum(len, true, f);
            assert_eq!(a.to_bits(), b.to_bits(), "len {len}");
        }
    }

    #[test]
    fn quantiles() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&xs), 2.5);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!(median(&[]).is_nan());
    }
}
