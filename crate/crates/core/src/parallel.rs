//! Per-example data parallelism.
//!
//! Work items (training examples, evaluation examples, decode requests)
//! each own an independent tape; results come back in input order, so any
//! reduction over them is performed sequentially and stays bit-exact no
//! matter how many threads ran the map. Without the `parallel` feature
//! everything runs on the calling thread.

/// How to run a batch of independent work items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` when the crate was built with rayon, else `Sequential`.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<I, O, F>(exec: Exec, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Like [`map`] but short-circuits to the first error in input order.
pub fn try_map<I, O, E, F>(exec: Exec, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(usize, &I) -> Result<O, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map(Exec::Sequential, &xs, |i, &x| x * 3 + i as u64);
        let par = map(Exec::Parallel, &xs, |i, &x| x * 3 + i as u64);
        assert_eq!(seq, par);
    }
}
