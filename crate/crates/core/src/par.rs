//! Execution policy and instrumentation shared by every data-parallel loop.
//!
//! With the `parallel` feature, [`Policy::Parallel`] fans independent work items
//! (heads, subjects, batch items, matrix rows) out over rayon. Without it, every
//! policy runs sequentially. Results are always collected in index order and
//! reduced in a fixed order, so both paths produce bit-identical output.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::attention::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    Sequential,
    #[default]
    Parallel,
}

impl Policy {
    /// True when work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Policy::Parallel
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(policy: Policy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Applies `f` to each `chunk`-sized slice of `data` together with its chunk index.
pub fn for_each_chunk_mut<T, F>(policy: Policy, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if policy.is_parallel() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = policy;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Caps the global worker pool. `0` leaves rayon's default (one per core).
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        // Fails only if the pool was already built; the first caller wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let _ = threads;
}

/// Runtime counters incremented by the attention kernel as it executes.
///
/// `flops` counts two per multiply-add (QKᵀ and A·V products only);
/// `exps` counts softmax exponentials.
#[derive(Debug, Default)]
pub struct OpCounter {
    flops: AtomicU64,
    exps: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, flops: u64, exps: u64) {
        self.flops.fetch_add(flops, Ordering::Relaxed);
        self.exps.fetch_add(exps, Ordering::Relaxed);
    }

    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn exps(&self) -> u64 {
        self.exps.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.flops.store(0, Ordering::Relaxed);
        self.exps.store(0, Ordering::Relaxed);
    }
}

/// Everything a kernel needs besides its operands.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exec<'a> {
    pub policy: Policy,
    pub counter: Option<&'a OpCounter>,
    pub trace: Option<&'a AttentionTrace>,
}

impl<'a> Exec<'a> {
    pub fn sequential() -> Self {
        Exec { policy: Policy::Sequential, ..Default::default() }
    }

    pub fn with_policy(policy: Policy) -> Self {
        Exec { policy, ..Default::default() }
    }

    pub fn counted(mut self, counter: &'a OpCounter) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn traced(mut self, trace: &'a AttentionTrace) -> Self {
        self.trace = Some(trace);
        self
    }

    /// Same execution settings without the trace sink.
    pub fn untraced(self) -> Self {
        Exec { trace: None, ..self }
    }
}
