//! Execution strategy for the data-parallel loops in the engine.
//!
//! With the `parallel` feature (default) the hot loops run on the rayon
//! global pool. Without it, or with [`Strategy::Sequential`], they run on the
//! calling thread. Both paths produce bit-identical results: parallel maps
//! only ever compute independent elements, and every reduction happens
//! sequentially afterwards in index order.

/// Which loop driver to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    Parallel,
}

impl Default for Strategy {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Strategy::Parallel
        } else {
            Strategy::Sequential
        }
    }
}

impl Strategy {
    /// True when this strategy will actually fan out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Strategy::Parallel
    }
}

/// Map `f` over `0..n`, collecting in index order.
pub fn map_range<T, F>(n: usize, strategy: Strategy, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if strategy.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = strategy;
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting in order.
pub fn map_slice<S, T, F>(items: &[S], strategy: Strategy, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if strategy.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = strategy;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_agree() {
        let seq = map_range(1000, Strategy::Sequential, |i| (i as f64).sqrt());
        let par = map_range(1000, Strategy::Parallel, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(
            map_slice(&items, Strategy::Sequential, |x| x * 3),
            map_slice(&items, Strategy::Parallel, |x| x * 3)
        );
    }
}
