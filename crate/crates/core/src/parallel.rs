//! Data-parallel map with a sequential fallback.
//!
//! Results are always returned in index order, so any reduction the caller
//! performs afterwards sees the same operand order whether or not the
//! `parallel` feature is enabled.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Rayon when the `parallel` feature is compiled in, otherwise sequential.
    #[default]
    Auto,
    Sequential,
}

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    map_indexed_with(Execution::Auto, n, f)
}

pub fn map_indexed_with<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Auto => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(&f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let a = map_indexed_with(Execution::Auto, 100, |i| i * i);
        let b = map_indexed_with(Execution::Sequential, 100, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }
}
