//! The system manager: a background loop that ages profiling data, checks
//! per-procedure stability, schedules candidates by estimated profitability,
//! optimizes one candidate at a time, and swaps new images in at safe
//! points, with exponential sleep backoff while idle.
//!
//! Time is the VM's virtual clock, so runs are fully deterministic.

use std::collections::HashMap;

use thiserror::Error;

use crate::loader::{load_extension, load_module, LoadError};
use crate::optimizer::{
    OptimizationSystem, OptimizeError, PhaseContext, MIN_MEASURE_WINDOW,
};
use crate::profiling::{
    InstrumentationRegistry, MeasureKind, ProfileMessage, ProfilingSystem, RequestCode,
    SharedRegistry, Target,
};
use crate::replacer::{self, AssumptionRegistry, SwapReport, TranslationTuple};
use crate::similarity::SimilarityParams;
use crate::transport::TransportModule;
use crate::vm::{Step, Value, Vm, VmError};

#[derive(Debug, Clone, PartialEq)]
pub struct ManagerConfig {
    /// Virtual-clock ticks between aging passes.
    pub age_sleep_time: u64,
    /// Ticks between stability sweeps over all procedures.
    pub similarity_sleep_time: u64,
    /// Minimum summed speedup estimate worth scheduling.
    pub estimate_gate: f64,
    pub initial_sleep: u64,
    /// Sampling period for the hotness profiler, in ticks.
    pub sample_period: Option<u64>,
    /// Register path-profiling interest for every procedure at startup and
    /// at extension load.
    pub instrument_all: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            age_sleep_time: 1_000_000,
            similarity_sleep_time: 100_000,
            estimate_gate: 0.05,
            initial_sleep: 1,
            sample_period: Some(101),
            instrument_all: true,
        }
    }
}

/// Max-priority queue of (procedure, estimate); a procedure appears at most
/// once and re-adding updates its priority.
#[derive(Debug, Default)]
pub struct CandidateQueue {
    entries: Vec<(String, f64)>,
}

impl CandidateQueue {
    pub fn add(&mut self, proc: &str, estimate: f64) {
        match self.entries.iter_mut().find(|(p, _)| p == proc) {
            Some(e) => e.1 = estimate,
            None => self.entries.push((proc.to_string(), estimate)),
        }
    }

    pub fn pop(&mut self) -> Option<(String, f64)> {
        if self.entries.is_empty() {
            return None;
        }
        // Highest estimate wins; name order breaks ties deterministically.
        let best = self
            .entries
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
            .unwrap();
        Some(self.entries.remove(best))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug)]
struct PendingMeasure {
    newly_applied: Vec<String>,
    old_mean: f64,
    base_invocations: u64,
    base_self_cost: u64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error("no entry procedure")]
    NoEntry,
}

/// Resolved before/after cost comparison for one swap.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub proc: String,
    pub old_mean: f64,
    pub new_mean: f64,
}

#[derive(Debug, Default)]
pub struct RunReport {
    pub result: Option<Value>,
    pub total_clock: u64,
    pub optimizations: u64,
    pub swaps: Vec<SwapReport>,
    pub measurements: Vec<Measurement>,
    pub invalidations: u64,
    pub stats: Vec<(String, crate::vm::PerfStats)>,
    pub history: Vec<String>,
    pub profile: Vec<String>,
}

impl RunReport {
    /// Line-oriented, key=value serialization; doubles as the
    /// machine-readable form.
    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let result = match self.result {
            Some(Value::Int(n)) => n.to_string(),
            Some(_) => "non-int".to_string(),
            None => "none".to_string(),
        };
        lines.push(format!(
            "report result={result} total_clock={} optimizations={} swaps={} invalidations={}",
            self.total_clock,
            self.optimizations,
            self.swaps.len(),
            self.invalidations
        ));
        for s in &self.swaps {
            lines.push(format!(
                "swap proc={} old={} new={} globals={} store={} frames={}",
                s.proc, s.tuple.old, s.tuple.new, s.globals, s.store, s.frames
            ));
        }
        for m in &self.measurements {
            lines.push(format!(
                "measure proc={} old_mean={:.6} new_mean={:.6}",
                m.proc, m.old_mean, m.new_mean
            ));
        }
        for (proc, st) in &self.stats {
            lines.push(format!(
                "stats proc={proc} invocations={} self_cost={} inclusive_cost={}",
                st.invocations, st.self_cost, st.inclusive_cost
            ));
        }
        lines.extend(self.history.iter().cloned());
        lines.extend(self.profile.iter().cloned());
        lines
    }
}

pub struct System {
    pub vm: Vm,
    pub profiles: ProfilingSystem,
    pub optimizer: OptimizationSystem,
    pub assumptions: AssumptionRegistry,
    pub registry: SharedRegistry,
    pub config: ManagerConfig,

    sleep: u64,
    next_wake: u64,
    next_age: u64,
    next_similarity: u64,
    pub queue: CandidateQueue,
    pending_swaps: Vec<(String, TranslationTuple)>,
    pending_measure: HashMap<String, PendingMeasure>,
    /// Scheduled sleep intervals, in order; inspectable backoff record.
    pub sleep_history: Vec<u64>,
    optimizations: u64,
    swaps: Vec<SwapReport>,
    pub measurements: Vec<Measurement>,
    invalidations: u64,
}

impl System {
    pub fn new(config: ManagerConfig, params: SimilarityParams) -> Self {
        let registry = InstrumentationRegistry::shared();
        let mut vm = Vm::new();
        vm.set_sample_period(config.sample_period);
        System {
            vm,
            profiles: ProfilingSystem::new(params),
            optimizer: OptimizationSystem::new(),
            assumptions: AssumptionRegistry::default(),
            registry,
            sleep: config.initial_sleep,
            next_wake: config.initial_sleep,
            next_age: config.age_sleep_time,
            next_similarity: config.similarity_sleep_time,
            config,
            queue: CandidateQueue::default(),
            pending_swaps: Vec::new(),
            pending_measure: HashMap::new(),
            sleep_history: Vec::new(),
            optimizations: 0,
            swaps: Vec::new(),
            measurements: Vec::new(),
            invalidations: 0,
        }
    }

    /// Register the standard profiling components wired to this system's
    /// instrumentation registry.
    pub fn with_standard_profilers(self) -> Self {
        use crate::profiling::components::{BlockProfiler, PathProfiler, SamplingProfiler};
        self.profiles
            .register_component(Box::new(PathProfiler::new(self.registry.clone())))
            .unwrap();
        self.profiles
            .register_component(Box::new(SamplingProfiler::new()))
            .unwrap();
        self.profiles
            .register_component(Box::new(BlockProfiler::new(self.registry.clone())))
            .unwrap();
        self
    }

    pub fn with_standard_phases(mut self) -> Self {
        for phase in crate::optimizer::phases::standard_phases(&self.registry) {
            self.optimizer.register_phase(phase).unwrap();
        }
        self
    }

    pub fn load(&mut self, module: &TransportModule) -> Result<(), LoadError> {
        load_module(module, &mut self.vm)?;
        if self.config.instrument_all {
            self.register_interest_all();
        }
        Ok(())
    }

    fn register_interest_all(&mut self) {
        for proc in self.vm.procedure_names() {
            let mut msg = ProfileMessage::measure(
                MeasureKind::PathCnt,
                RequestCode::Register,
                Target::Proc { proc },
            );
            self.profiles.broadcast(&mut msg);
        }
    }

    pub fn swap_count(&self) -> usize {
        self.swaps.len()
    }

    pub fn optimization_count(&self) -> u64 {
        self.optimizations
    }

    // -- manager tick ------------------------------------------------------

    /// One pass of the background loop. Call at a safe point once the
    /// virtual clock has passed the wake-up time.
    pub fn tick(&mut self) {
        self.profiles.absorb(&mut self.vm);

        // (1) age
        if self.vm.virtual_clock >= self.next_age {
            self.profiles.age();
            self.next_age += self.config.age_sleep_time;
        }

        // (2) stability sweep + candidate scheduling
        if self.vm.virtual_clock >= self.next_similarity {
            for proc in self.vm.procedure_names() {
                if !self.profiles.stable_proc(&proc) {
                    let estimate = self.optimizer.estimate(&proc);
                    if estimate > self.config.estimate_gate {
                        self.queue.add(&proc, estimate);
                    }
                }
            }
            self.next_similarity += self.config.similarity_sleep_time;
        }

        // Retry swaps that were deferred while frames were active.
        self.retry_pending_swaps();
        // Fold in any measurement windows that have filled.
        self.resolve_measurements();

        // (3) one candidate per tick
        let optimized = match self.queue.pop() {
            Some((proc, _estimate)) => self.optimize_and_swap(&proc),
            None => false,
        };
        self.sleep = if optimized {
            1
        } else {
            (self.sleep * 2).min(self.config.age_sleep_time)
        };
        self.schedule_wake();
    }

    fn schedule_wake(&mut self) {
        self.sleep_history.push(self.sleep);
        self.next_wake = self.vm.virtual_clock + self.sleep;
    }

    pub fn current_sleep(&self) -> u64 {
        self.sleep
    }

    fn optimize_and_swap(&mut self, proc: &str) -> bool {
        let outcome = {
            let ctx = PhaseContext {
                vm: &self.vm,
                profiles: &self.profiles,
                registry: &self.registry,
            };
            match self.optimizer.optimize(proc, &ctx) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("optimize {proc} failed: {e}; candidate dropped");
                    return false;
                }
            }
        };
        let Some(old) = self.vm.lookup_procedure(proc) else { return false };
        // Re-optimizing a procedure that is already at its fixed point just
        // reproduces the running code; swapping it would churn handles and
        // reset the backoff for nothing. Compare against the staged image if
        // a swap is still waiting for frames to drain.
        let compare = self
            .pending_swaps
            .iter()
            .find(|(p, _)| p == proc)
            .map(|(_, t)| t.new)
            .unwrap_or(old);
        if self.vm.image(compare).is_some_and(|cur| {
            cur.instructions == outcome.image.instructions
                && cur.register_count == outcome.image.register_count
        }) {
            return false;
        }
        if let Some(pos) = self.pending_swaps.iter().position(|(p, _)| p == proc) {
            let (_, stale) = self.pending_swaps.remove(pos);
            self.vm.discard_image(stale.new);
        }
        let new = self.vm.stage_image(outcome.image);
        for a in &outcome.assumptions {
            self.assumptions.register(&a.global, a.expected, proc);
            self.vm.guard_global(&a.global);
        }
        self.optimizations += 1;

        // Snapshot the pre-swap cost as the measurement baseline.
        let stats = self.vm.snapshot_stats(proc).unwrap_or_default();
        let old_mean = stats.mean_self_cost().unwrap_or(0.0);
        self.pending_measure.insert(
            proc.to_string(),
            PendingMeasure {
                newly_applied: outcome.newly_applied,
                old_mean,
                base_invocations: stats.invocations,
                base_self_cost: stats.self_cost,
            },
        );

        let tuple = TranslationTuple { old, new };
        match replacer::replace(&mut self.vm, &mut self.assumptions, proc, tuple) {
            Ok(report) => {
                self.swaps.push(report);
                true
            }
            Err(replacer::ReplaceError::StillActive(_)) => {
                self.pending_swaps.push((proc.to_string(), tuple));
                true // optimization happened even though the swap waits
            }
            Err(e) => {
                log::warn!("swap of {proc} failed: {e}");
                false
            }
        }
    }

    fn retry_pending_swaps(&mut self) {
        let pending = std::mem::take(&mut self.pending_swaps);
        for (proc, tuple) in pending {
            match replacer::replace(&mut self.vm, &mut self.assumptions, &proc, tuple) {
                Ok(report) => self.swaps.push(report),
                Err(replacer::ReplaceError::StillActive(_)) => {
                    self.pending_swaps.push((proc, tuple));
                }
                Err(e) => log::warn!("deferred swap of {proc} failed: {e}"),
            }
        }
    }

    fn resolve_measurements(&mut self) {
        let mut done = Vec::new();
        for (proc, pending) in &self.pending_measure {
            let Ok(stats) = self.vm.snapshot_stats(proc) else {
                done.push((proc.clone(), None));
                continue;
            };
            let window = stats.invocations.saturating_sub(pending.base_invocations);
            if window >= MIN_MEASURE_WINDOW {
                let new_mean = (stats.self_cost - pending.base_self_cost) as f64
                    / window as f64;
                done.push((proc.clone(), Some(new_mean)));
            }
        }
        for (proc, new_mean) in done {
            let pending = self.pending_measure.remove(&proc).unwrap();
            if let Some(new_mean) = new_mean {
                self.optimizer.measure_and_attribute(
                    &proc,
                    pending.old_mean,
                    new_mean,
                    &pending.newly_applied,
                );
                self.measurements.push(Measurement {
                    proc,
                    old_mean: pending.old_mean,
                    new_mean,
                });
            }
        }
    }

    // -- run driver --------------------------------------------------------

    /// Execute the loaded workload to completion, interleaving manager
    /// ticks, extension loads, and assumption invalidation at safe points.
    pub fn run(
        &mut self,
        args: Vec<Value>,
        mut extensions: Vec<(TransportModule, u64)>,
    ) -> Result<RunReport, RunError> {
        extensions.sort_by_key(|(_, tick)| *tick);
        let entry = self.vm.entry().ok_or(RunError::NoEntry)?.to_string();
        self.vm.start(&entry, args)?;
        self.next_wake = self.vm.virtual_clock + self.sleep;

        let mut ext_iter = extensions.into_iter().peekable();
        let result = loop {
            match self.vm.step() {
                Ok(Step::Done(v)) => break v,
                Ok(Step::Ran) => {}
                Ok(Step::Safepoint(_)) => {
                    // Deferred swaps take the earliest legal safepoint.
                    if !self.pending_swaps.is_empty() {
                        self.retry_pending_swaps();
                    }
                    while ext_iter
                        .peek()
                        .is_some_and(|(_, t)| self.vm.virtual_clock >= *t)
                    {
                        let (module, _) = ext_iter.next().unwrap();
                        self.load_extension_now(&module)?;
                    }
                    if self.vm.virtual_clock >= self.next_wake {
                        self.tick();
                    }
                }
                Ok(Step::GuardedStore { global, value }) => {
                    self.handle_guarded_store(&global, &value);
                }
                Err(e) => {
                    // Trap: report what we have.
                    let mut report = self.make_report(None);
                    report.total_clock = self.vm.virtual_clock;
                    log::warn!("workload trapped: {e}");
                    return Err(RunError::Vm(e));
                }
            }
        };

        self.profiles.absorb(&mut self.vm);
        Ok(self.make_report(Some(result)))
    }

    fn handle_guarded_store(&mut self, global: &str, value: &Value) {
        self.profiles.absorb(&mut self.vm);
        let report = replacer::invalidate(
            &mut self.vm,
            &mut self.assumptions,
            &mut self.optimizer,
            &self.profiles,
            &self.registry,
            global,
            value,
        );
        self.invalidations += 1;
        self.swaps.extend(report.swapped);
        self.pending_swaps.extend(report.deferred);
        if self.assumptions.keys_for_global(global).is_empty() {
            self.vm.unguard_global(global);
        }
        self.vm.resume_after_guard();
    }

    /// Load an extension at the current safe point and run its entry
    /// procedure (if any) as a nested invocation.
    pub fn load_extension_now(&mut self, module: &TransportModule) -> Result<(), RunError> {
        load_extension(module, &mut self.vm)?;
        self.vm.trace_event(&format!("event=load_extension module={}", module.name));
        if self.config.instrument_all {
            self.register_interest_all();
        }
        if let Some(entry) = module.entry.clone() {
            let depth = self.vm.frame_depth();
            self.vm.start(&entry, vec![])?;
            while self.vm.frame_depth() > depth {
                match self.vm.step()? {
                    Step::GuardedStore { global, value } => {
                        self.handle_guarded_store(&global, &value);
                    }
                    Step::Done(_) => break,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn make_report(&self, result: Option<Value>) -> RunReport {
        let mut stats = Vec::new();
        for proc in self.vm.procedure_names() {
            if let Ok(s) = self.vm.snapshot_stats(&proc) {
                stats.push((proc, s));
            }
        }
        RunReport {
            result,
            total_clock: self.vm.virtual_clock,
            optimizations: self.optimizations,
            swaps: self.swaps.clone(),
            measurements: self.measurements.clone(),
            invalidations: self.invalidations,
            stats,
            history: self.optimizer.history.dump(),
            profile: self.profiles.dump(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::parse_transport;

    fn system() -> System {
        System::new(ManagerConfig::default(), SimilarityParams::default())
            .with_standard_profilers()
            .with_standard_phases()
    }

    #[test]
    fn queue_orders_by_descending_estimate() {
        let mut q = CandidateQueue::default();
        q.add("a", 0.10);
        q.add("b", 0.30);
        q.add("c", 0.20);
        assert_eq!(q.pop().unwrap().0, "b");
        assert_eq!(q.pop().unwrap().0, "c");
        assert_eq!(q.pop().unwrap().0, "a");
        assert!(q.pop().is_none());
    }

    #[test]
    fn queue_re_add_updates_priority() {
        let mut q = CandidateQueue::default();
        q.add("a", 0.10);
        q.add("b", 0.20);
        q.add("a", 0.50);
        assert_eq!(q.len(), 2);
        assert_eq!(q.pop().unwrap(), ("a".to_string(), 0.50));
    }

    #[test]
    fn idle_ticks_double_sleep_up_to_cap() {
        let mut sys = System::new(
            ManagerConfig { age_sleep_time: 16, similarity_sleep_time: 16, ..Default::default() },
            SimilarityParams::default(),
        );
        // No workload: every tick is idle.
        for _ in 0..6 {
            sys.tick();
        }
        assert_eq!(sys.sleep_history, vec![2, 4, 8, 16, 16, 16]);
    }

    #[test]
    fn hot_loop_gets_optimized_and_swapped() {
        let mut sys = system();
        sys.config.age_sleep_time = 200_000;
        sys.config.similarity_sleep_time = 2_000;
        sys.next_age = sys.config.age_sleep_time;
        sys.next_similarity = sys.config.similarity_sleep_time;
        let m = parse_transport(
            "module m\n\
             proc work nparams 1\n\
             block b0\n  a = const 2\n  b = const 3\n  c = add a b\n  d = mul c c\n  e = add d p0\n  ret e\n\
             proc main nparams 1 entry\n\
             block b0\n  i = const 0\n  acc = const 0\n  br head\n\
             block head\n  c = cmp_lt i p0\n  br_if c body exit\n\
             block body\n  v = call work (i)\n  acc = add acc v\n  one = const 1\n  i = add i one\n  br head\n\
             block exit\n  ret acc\n",
        )
        .unwrap();
        sys.load(&m).unwrap();
        let report = sys.run(vec![Value::Int(4000)], vec![]).unwrap();
        assert!(report.optimizations >= 1, "report: {:?}", report.to_lines());
        assert!(!report.swaps.is_empty());
        // Output must be what a plain interpreter computes.
        let expected: i64 = (0..4000).map(|i| (25 + i) as i64).sum();
        assert_eq!(report.result, Some(Value::Int(expected)));
    }

    #[test]
    fn short_workload_sees_no_optimization() {
        let mut sys = system();
        let m = parse_transport(
            "module m\nproc main nparams 0 entry\nblock b0\n  v = const 42\n  ret v\n",
        )
        .unwrap();
        sys.load(&m).unwrap();
        let report = sys.run(vec![], vec![]).unwrap();
        assert_eq!(report.optimizations, 0);
        assert_eq!(report.result, Some(Value::Int(42)));
    }

    #[test]
    fn gate_blocks_low_estimates() {
        let mut sys = system();
        sys.config.estimate_gate = 10.0; // nothing can clear this
        sys.config.similarity_sleep_time = 1_000;
        sys.next_similarity = 1_000;
        let m = parse_transport(
            "module m\nproc main nparams 1 entry\n\
             block b0\n  i = const 0\n  br head\n\
             block head\n  one = const 1\n  i = add i one\n  c = cmp_lt i p0\n  br_if c head exit\n\
             block exit\n  ret i\n",
        )
        .unwrap();
        sys.load(&m).unwrap();
        let report = sys.run(vec![Value::Int(50_000)], vec![]).unwrap();
        assert_eq!(report.optimizations, 0);
    }
}
