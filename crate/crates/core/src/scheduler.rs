//! Parallel particle loop.
//!
//! Memory-state contract of the loop body:
//!
//! | variable                       | class           |
//! |--------------------------------|-----------------|
//! | grid, flow view, config        | shared, read-only |
//! | engine, observer, scratch      | per worker      |
//! | `t_max`, weak-sink policy      | copied in       |
//! | counters                       | reduced (sum)   |
//! | particles                      | each index owned by exactly one worker |
//!
//! The only shared mutable state is the dynamic claim counter, the abort
//! flag, and whatever exclusion region the output protocol documents.

use std::any::Any;
use std::fmt;
use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::tracking::{track_particle, Counters, Particle, TrackError, TrackObserver, TrackingEngine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleSpec {
    Static,
    Dynamic { chunk: usize },
}

impl ScheduleSpec {
    pub const DYNAMIC: ScheduleSpec = ScheduleSpec::Dynamic { chunk: 1 };

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleSpec::Static => "static",
            ScheduleSpec::Dynamic { .. } => "dynamic",
        }
    }

    pub fn chunk(&self) -> usize {
        match self {
            ScheduleSpec::Static => 0,
            ScheduleSpec::Dynamic { chunk } => *chunk,
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleSpec {
    type Err = String;

    /// Accepts `static`, `dynamic` and `dynamic:<chunk>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "static" => Ok(ScheduleSpec::Static),
            None if s == "dynamic" => Ok(ScheduleSpec::DYNAMIC),
            Some(("dynamic", c)) => match c.parse::<usize>() {
                Ok(chunk) if chunk >= 1 => Ok(ScheduleSpec::Dynamic { chunk }),
                _ => Err(format!("invalid dynamic chunk `{c}`")),
            },
            _ => Err(format!("unknown schedule `{s}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("dynamic chunk must be at least 1")]
    BadChunk,
    #[error("worker {worker}: {source}")]
    Track {
        worker: usize,
        #[source]
        source: TrackError,
    },
    #[error("worker {worker}: flushing output failed: {source}")]
    Flush {
        worker: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("worker {worker} panicked: {message}")]
    Panic { worker: usize, message: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopStats {
    /// Particles handled by each worker.
    pub per_worker: Vec<u64>,
    pub counters: Counters,
    pub wall_time: Duration,
}

impl LoopStats {
    pub fn processed(&self) -> u64 {
        self.per_worker.iter().sum()
    }

    /// Accumulates another loop's statistics (worker vectors are summed
    /// element-wise).
    pub fn merge(&mut self, other: &LoopStats) {
        if self.per_worker.len() < other.per_worker.len() {
            self.per_worker.resize(other.per_worker.len(), 0);
        }
        for (a, b) in self.per_worker.iter_mut().zip(&other.per_worker) {
            *a += b;
        }
        self.counters += other.counters;
        self.wall_time += other.wall_time;
    }
}

/// Something that can advance one particle up to `t_max`.
pub trait ParticleEngine<O: ?Sized> {
    fn process(&mut self, particle: &mut Particle, t_max: f64, observer: &mut O) -> Result<Counters, TrackError>;
}

impl<O: TrackObserver + ?Sized> ParticleEngine<O> for TrackingEngine<'_> {
    #[inline]
    fn process(&mut self, particle: &mut Particle, t_max: f64, observer: &mut O) -> Result<Counters, TrackError> {
        track_particle(self.view, particle, t_max, self.policy, observer)
    }
}

/// Observers that buffer output get a chance to flush when a worker ends.
pub trait WorkerObserver: TrackObserver {
    fn finish(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl WorkerObserver for crate::tracking::NullObserver {}

/// Contiguous balanced ranges; sizes differ by at most one and the larger
/// ranges come first.
pub fn static_partition(n: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.max(1);
    let base = n / workers;
    let extra = n % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Hands out disjoint `&mut` elements of a slice to several threads.
struct ClaimSlice<'a, T> {
    ptr: *mut T,
    len: usize,
    _marker: std::marker::PhantomData<&'a mut [T]>,
}

unsafe impl<T: Send> Sync for ClaimSlice<'_, T> {}

impl<'a, T> ClaimSlice<'a, T> {
    fn new(slice: &'a mut [T]) -> Self {
        ClaimSlice {
            ptr: slice.as_mut_ptr(),
            len: slice.len(),
            _marker: std::marker::PhantomData,
        }
    }

    /// # Safety
    /// Each range must be handed out at most once while `self` is alive.
    #[allow(clippy::mut_from_ref)]
    unsafe fn range(&self, r: Range<usize>) -> &'a mut [T] {
        assert!(r.start <= r.end && r.end <= self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(r.start), r.end - r.start)
    }
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic payload".to_string()
    }
}

struct WorkerResult {
    processed: u64,
    counters: Counters,
}

fn run_worker<'p, E, O>(
    worker: usize,
    mut engine: E,
    mut observer: O,
    next: &mut dyn FnMut() -> Option<&'p mut [Particle]>,
    t_max: f64,
    abort: &AtomicBool,
) -> Result<WorkerResult, LoopError>
where
    E: ParticleEngine<O>,
    O: WorkerObserver,
{
    let mut res = WorkerResult {
        processed: 0,
        counters: Counters::default(),
    };
    while let Some(batch) = next() {
        if abort.load(Ordering::Relaxed) {
            break;
        }
        for p in batch {
            match engine.process(p, t_max, &mut observer) {
                Ok(c) => res.counters += c,
                Err(source) => {
                    abort.store(true, Ordering::Relaxed);
                    return Err(LoopError::Track { worker, source });
                }
            }
            res.processed += 1;
        }
    }
    observer
        .finish()
        .map_err(|source| LoopError::Flush { worker, source })?;
    Ok(res)
}

/// Runs every particle up to `t_max` on `n_workers` workers.
///
/// Worker 0 runs on the calling thread, so a single worker never spawns.
/// Results are independent of the worker count and schedule; only the order
/// in which observers see particles changes.
pub fn run_particle_loop<E, O, FE, FO>(
    particles: &mut [Particle],
    n_workers: usize,
    schedule: ScheduleSpec,
    engine_factory: FE,
    observer_factory: FO,
    t_max: f64,
) -> Result<LoopStats, LoopError>
where
    E: ParticleEngine<O>,
    O: WorkerObserver,
    FE: Fn(usize) -> E + Sync,
    FO: Fn(usize) -> O + Sync,
{
    if n_workers == 0 {
        return Err(LoopError::NoWorkers);
    }
    if schedule == (ScheduleSpec::Dynamic { chunk: 0 }) {
        return Err(LoopError::BadChunk);
    }
    let start = Instant::now();
    let n = particles.len();
    let abort = AtomicBool::new(false);
    let claim = AtomicUsize::new(0);
    let slice = ClaimSlice::new(particles);
    let ranges = static_partition(n, n_workers);

    let work = |w: usize| -> Result<WorkerResult, LoopError> {
        let engine = engine_factory(w);
        let observer = observer_factory(w);
        match schedule {
            ScheduleSpec::Static => {
                let mut own = Some(ranges[w].clone());
                let mut next = || {
                    // SAFETY: static ranges are disjoint and each is taken once.
                    own.take().map(|r| unsafe { slice.range(r) })
                };
                run_worker(w, engine, observer, &mut next, t_max, &abort)
            }
            ScheduleSpec::Dynamic { chunk } => {
                let mut next = || {
                    let s = claim.fetch_add(chunk, Ordering::Relaxed);
                    // SAFETY: the atomic counter hands out every index once.
                    (s < n).then(|| unsafe { slice.range(s..(s + chunk).min(n)) })
                };
                run_worker(w, engine, observer, &mut next, t_max, &abort)
            }
        }
    };

    let results: Vec<Result<WorkerResult, LoopError>> = thread::scope(|scope| {
        let handles: Vec<_> = (1..n_workers)
            .map(|w| {
                let work = &work;
                scope.spawn(move || work(w))
            })
            .collect();
        let first = panic::catch_unwind(AssertUnwindSafe(|| work(0))).unwrap_or_else(|p| {
            abort.store(true, Ordering::Relaxed);
            Err(LoopError::Panic {
                worker: 0,
                message: panic_message(p),
            })
        });
        let mut all = vec![first];
        for (i, h) in handles.into_iter().enumerate() {
            all.push(h.join().unwrap_or_else(|p| {
                Err(LoopError::Panic {
                    worker: i + 1,
                    message: panic_message(p),
                })
            }));
        }
        all
    });

    let mut stats = LoopStats {
        per_worker: Vec::with_capacity(n_workers),
        ..Default::default()
    };
    let mut first_err = None;
    for r in results {
        match r {
            Ok(r) => {
                stats.per_worker.push(r.processed);
                stats.counters += r.counters;
            }
            Err(e) => {
                stats.per_worker.push(0);
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    stats.wall_time = start.elapsed();
    Ok(stats)
}
