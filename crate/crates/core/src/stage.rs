//! Shared plumbing for manifest-writing stages.

use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageContext {
    pub clock: Clock,
    /// Worker threads for per-item work.
    pub jobs: usize,
}

impl Default for StageContext {
    fn default() -> Self {
        Self { clock: Clock::from_env(), jobs: 1 }
    }
}

impl StageContext {
    pub fn new(clock: Clock, jobs: usize) -> Self {
        Self { clock, jobs: jobs.max(1) }
    }
}

/// A non-fatal per-item error carried in stage reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemFailure {
    pub item: String,
    pub error: String,
}

impl ItemFailure {
    pub fn new(item: impl Into<String>, error: impl ToString) -> Self {
        Self { item: item.into(), error: error.to_string() }
    }
}

/// Maps `f` over `items`, preserving order. Runs on `jobs` threads when
/// `parallel` allows it.
pub(crate) fn map_items<T, R, F>(items: &[T], jobs: usize, parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 || !parallel || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}
