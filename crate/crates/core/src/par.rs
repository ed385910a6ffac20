//! Data-parallel helpers.
//!
//! Per-item work (gradient oracles over data points, cost evaluations over
//! validation samples) is mapped in parallel when the `parallel` feature is
//! enabled and the policy asks for it. Results are always collected in
//! index order and every reduction over them is done sequentially by the
//! caller, so both policies produce bit-identical output.

use serde::{Deserialize, Serialize};

/// Below this many items the sequential path is used regardless of policy.
pub const MIN_PARALLEL_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

impl ExecPolicy {
    /// Whether this policy will actually fan out on the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// `(0..len).map(f).collect()`, fanned out over the rayon pool when allowed.
pub fn map_indexed<T, F>(policy: ExecPolicy, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if policy.is_parallel() && len >= MIN_PARALLEL_LEN {
            use rayon::prelude::*;
            return (0..len).into_par_iter().with_min_len(16).map(f).collect();
        }
    }
    let _ = policy;
    (0..len).map(f).collect()
}

/// Fill `out` in chunks of `width`, one chunk per item.
pub fn fill_chunks<F>(policy: ExecPolicy, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if policy.is_parallel() && out.len() / width >= MIN_PARALLEL_LEN {
            use rayon::prelude::*;
            out.par_chunks_mut(width)
                .with_min_len(16)
                .enumerate()
                .for_each(|(k, chunk)| f(k, chunk));
            return;
        }
    }
    let _ = policy;
    for (k, chunk) in out.chunks_mut(width).enumerate() {
        f(k, chunk);
    }
}
