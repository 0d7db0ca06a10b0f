//! Execution policy for data-parallel loops.
//!
//! Every parallel map collects results in input order, and callers reduce
//! them sequentially, so results are bit-identical across policies and
//! thread counts.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
    #[default]
    Parallel,
}

impl ExecPolicy {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            ExecPolicy::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            ExecPolicy::Parallel => par_map(items, f),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            ExecPolicy::Sequential => (0..n).map(f).collect(),
            ExecPolicy::Parallel => par_map_range(n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree_on_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = ExecPolicy::Sequential.map(&xs, |i, x| x * 3 + i as u64);
        let b = ExecPolicy::Parallel.map(&xs, |i, x| x * 3 + i as u64);
        assert_eq!(a, b);
        assert_eq!(
            ExecPolicy::Sequential.map_range(17, |i| i * i),
            ExecPolicy::Parallel.map_range(17, |i| i * i)
        );
    }
}
