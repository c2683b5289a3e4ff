//! Thread-backed execution: a clone executor for the orchestrator and an
//! order-preserving worker pool for episode batches.

use std::sync::Mutex;
use std::thread;

use delegate_core::orchestrator::{CloneExecutor, CloneJob, JobOutcome};

/// Maps `f` over `items` on up to `workers` scoped threads. Output order
/// matches input order whatever the scheduling.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let workers = workers.max(1).min(n);
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue = Mutex::new(items.into_iter().enumerate());
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, item)) = next else { break };
                let out = f(item);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

/// Runs the clones of a turn on scoped threads.
#[derive(Clone, Copy, Debug)]
pub struct Threaded {
    pub max_threads: usize,
}

impl Default for Threaded {
    fn default() -> Self {
        Threaded {
            max_threads: thread::available_parallelism().map(|n| n.get()).unwrap_or(4),
        }
    }
}

impl CloneExecutor for Threaded {
    fn execute(&self, jobs: Vec<CloneJob>, run: &(dyn Fn(CloneJob) -> JobOutcome + Sync)) -> Vec<JobOutcome> {
        parallel_map(jobs, self.max_threads, run)
    }
}
