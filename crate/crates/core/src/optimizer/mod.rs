//! Optimizer subsystem: the optimization manager, the phase registry with
//! ordering anchors, the volatile history database, and the speedup model
//! that powers cheap profitability estimates.
//!
//! Phases are plug-ins. The manager asks each phase for its identity and
//! placement, computes a global schedule honoring every anchor, and drives
//! the Estimate / Optimize / Recompile protocol:
//!
//! * `estimate` is cheap by contract — it consults only priors, measured
//!   running averages, and the history database, never the procedure's IR.
//! * `optimize` rebuilds IR from the transport form every time and lets each
//!   phase re-evaluate profitability with full IR and live profile data.
//! * `recompile` is pessimistic: it re-applies exactly what history says was
//!   applied, skipping anything marked non-profitable, without re-deciding.

pub mod phases;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ir::{build_ssa, ProcedureIR};
use crate::loader::{lower_image, ExecImage, Origin};
use crate::profiling::ProfilingSystem;
use crate::profiling::SharedRegistry;
use crate::vm::{ProcedureHandle, Vm};

/// Measured speedup below this is "insignificant": the phase is marked
/// non-profitable for the procedure and never re-applied to it.
pub const NON_PROFIT_THRESHOLD: f64 = 0.01;
/// Weight of the newest measurement in a phase's running average.
pub const EWMA_WEIGHT: f64 = 0.3;
/// Invocations a new image must accumulate before its cost is trusted.
pub const MIN_MEASURE_WINDOW: u64 = 32;

// ---------------------------------------------------------------------------
// Phase protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Anchor {
    First,
    Last,
    Before(String),
    After(String),
}

/// Read-only view a phase gets of the rest of the system.
pub struct PhaseContext<'a> {
    pub vm: &'a Vm,
    pub profiles: &'a ProfilingSystem,
    pub registry: &'a SharedRegistry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssumptionRequest {
    pub global: String,
    pub expected: ProcedureHandle,
}

#[derive(Debug, Clone, Default)]
pub struct PhaseResult {
    /// Whether the phase changed the IR.
    pub applied: bool,
    /// Speculative dependencies the new image relies on.
    pub assumptions: Vec<AssumptionRequest>,
}

#[derive(Debug, Error)]
#[error("phase `{phase}` failed: {reason}")]
pub struct PhaseFailure {
    pub phase: String,
    pub reason: String,
}

pub trait OptimizationPhase {
    fn name(&self) -> &str;
    fn anchors(&self) -> Vec<Anchor>;
    /// Hard-coded average speedup used before any measurement exists.
    fn prior_speedup(&self) -> f64;
    /// Full-freedom application: inspect IR and profiles, decide, transform.
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure>;
    /// Pessimistic re-application without profitability re-evaluation.
    fn recompile(
        &mut self,
        ir: &mut ProcedureIR,
        ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        self.optimize(ir, ctx)
    }
    /// Whether measured speedup is attributed to this phase. Instrumentation
    /// insertion serves the profiler, not performance, and opts out.
    fn attributable(&self) -> bool {
        true
    }
    /// Whether recompile runs this phase even with no history entry
    /// (instrumentation must appear on explicitly requested recompiles).
    fn recompiles_without_history(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// History database
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Applied,
    NonProfitable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub phase: String,
    pub status: Status,
    pub last_speedup: Option<f64>,
    pub applications: u32,
    /// For speculative phases: the assumption the application relies on.
    pub assumption: Option<AssumptionRequest>,
}

/// Volatile: empty at cold start, never persisted.
#[derive(Debug, Default)]
pub struct HistoryDatabase {
    per_proc: BTreeMap<String, Vec<HistoryEntry>>,
    /// Per-phase measured-speedup running average. Survives phase
    /// deregistration so a re-registered phase resumes its record.
    ewma: BTreeMap<String, f64>,
}

impl HistoryDatabase {
    pub fn entries(&self, proc: &str) -> &[HistoryEntry] {
        self.per_proc.get(proc).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entry(&self, proc: &str, phase: &str) -> Option<&HistoryEntry> {
        self.entries(proc).iter().find(|e| e.phase == phase)
    }

    fn entry_mut(&mut self, proc: &str, phase: &str) -> Option<&mut HistoryEntry> {
        self.per_proc.get_mut(proc)?.iter_mut().find(|e| e.phase == phase)
    }

    pub fn ewma(&self, phase: &str) -> Option<f64> {
        self.ewma.get(phase).copied()
    }

    fn fold_measurement(&mut self, phase: &str, speedup: f64) {
        let v = match self.ewma.get(phase) {
            Some(old) => EWMA_WEIGHT * speedup + (1.0 - EWMA_WEIGHT) * old,
            None => speedup,
        };
        self.ewma.insert(phase.to_string(), v);
    }

    /// Delete entries whose assumption matches `(global, expected)`;
    /// returns the affected procedures in name order.
    pub fn remove_assumption_entries(
        &mut self,
        global: &str,
        expected: ProcedureHandle,
    ) -> Vec<String> {
        let mut affected = Vec::new();
        for (proc, entries) in self.per_proc.iter_mut() {
            let before = entries.len();
            entries.retain(|e| {
                e.assumption
                    .as_ref()
                    .map(|a| !(a.global == global && a.expected == expected))
                    .unwrap_or(true)
            });
            if entries.len() != before {
                affected.push(proc.clone());
            }
        }
        affected
    }

    pub fn dump(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for (proc, entries) in &self.per_proc {
            for e in entries {
                let status = match e.status {
                    Status::Applied => "applied",
                    Status::NonProfitable => "non_profitable",
                };
                let speedup = e
                    .last_speedup
                    .map(|s| format!("{s:.6}"))
                    .unwrap_or_else(|| "-".into());
                lines.push(format!(
                    "history proc={proc} phase={} status={status} speedup={speedup} applications={}",
                    e.phase, e.applications
                ));
            }
        }
        lines
    }
}

// ---------------------------------------------------------------------------
// Registry + schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("phase `{0}` already registered")]
    DuplicateName(String),
    #[error("phase `{0}` anchors to unknown phase `{1}`")]
    UnknownAnchor(String, String),
    #[error("phase anchors are unsatisfiable (cycle involving `{0}`)")]
    Unsatisfiable(String),
    #[error("phase `{0}` is not registered")]
    NotRegistered(String),
}

struct Registered {
    name: String,
    order: u64,
    phase: Box<dyn OptimizationPhase>,
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("no transport form for procedure `{0}`")]
    NoSource(String),
    #[error("SSA construction failed: {0}")]
    Build(String),
}

#[derive(Debug)]
pub struct OptimizeOutcome {
    pub image: ExecImage,
    /// Phases applied to this procedure for the first time in this pass;
    /// the next measurement window is attributed to them.
    pub newly_applied: Vec<String>,
    pub assumptions: Vec<AssumptionRequest>,
}

pub struct OptimizationSystem {
    registered: Vec<Registered>,
    next_order: u64,
    schedule: Vec<String>,
    pub history: HistoryDatabase,
    schedule_version: u64,
}

impl Default for OptimizationSystem {
    fn default() -> Self {
        Self::new()
    }
}

impl OptimizationSystem {
    pub fn new() -> Self {
        OptimizationSystem {
            registered: Vec::new(),
            next_order: 0,
            schedule: Vec::new(),
            history: HistoryDatabase::default(),
            schedule_version: 0,
        }
    }

    pub fn schedule(&self) -> &[String] {
        &self.schedule
    }

    pub fn register_phase(
        &mut self,
        phase: Box<dyn OptimizationPhase>,
    ) -> Result<(), RegistryError> {
        let name = phase.name().to_string();
        if self.registered.iter().any(|r| r.name == name) {
            return Err(RegistryError::DuplicateName(name));
        }
        for anchor in phase.anchors() {
            if let Anchor::Before(t) | Anchor::After(t) = &anchor {
                if !self.registered.iter().any(|r| r.name == *t) {
                    return Err(RegistryError::UnknownAnchor(name, t.clone()));
                }
            }
        }
        let order = self.next_order;
        self.next_order += 1;
        self.registered.push(Registered { name, order, phase });
        self.recompute_schedule()
    }

    pub fn remove_phase(&mut self, name: &str) -> Result<(), RegistryError> {
        let before = self.registered.len();
        self.registered.retain(|r| r.name != name);
        if self.registered.len() == before {
            return Err(RegistryError::NotRegistered(name.to_string()));
        }
        self.recompute_schedule()
    }

    pub fn replace_phase(
        &mut self,
        name: &str,
        phase: Box<dyn OptimizationPhase>,
    ) -> Result<(), RegistryError> {
        let slot = self
            .registered
            .iter_mut()
            .find(|r| r.name == name)
            .ok_or_else(|| RegistryError::NotRegistered(name.to_string()))?;
        slot.phase = phase;
        slot.name = slot.phase.name().to_string();
        self.recompute_schedule()
    }

    /// Topological sort over anchor constraints; ties broken by
    /// registration order. Anchors referencing a phase that has since been
    /// removed re-resolve to first/last with a warning.
    fn recompute_schedule(&mut self) -> Result<(), RegistryError> {
        let n = self.registered.len();
        let known: Vec<String> = self.registered.iter().map(|r| r.name.clone()).collect();
        let idx_of = |name: &str| known.iter().position(|k| k == name);

        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        let add_edge = |edges: &mut Vec<Vec<usize>>, indegree: &mut Vec<usize>, a: usize, b: usize| {
            if a != b && !edges[a].contains(&b) {
                edges[a].push(b);
                indegree[b] += 1;
            }
        };

        for (i, r) in self.registered.iter().enumerate() {
            for anchor in r.phase.anchors() {
                match anchor {
                    Anchor::First => {
                        for (j, other) in self.registered.iter().enumerate() {
                            if j != i && !other.phase.anchors().contains(&Anchor::First) {
                                add_edge(&mut edges, &mut indegree, i, j);
                            }
                        }
                    }
                    Anchor::Last => {
                        for (j, other) in self.registered.iter().enumerate() {
                            if j != i && !other.phase.anchors().contains(&Anchor::Last) {
                                add_edge(&mut edges, &mut indegree, j, i);
                            }
                        }
                    }
                    Anchor::Before(t) => match idx_of(&t) {
                        Some(j) => add_edge(&mut edges, &mut indegree, i, j),
                        None => {
                            log::warn!(
                                "phase `{}` anchored before removed phase `{t}`; re-resolving to last",
                                r.name
                            );
                            for (j, other) in self.registered.iter().enumerate() {
                                if j != i && !other.phase.anchors().contains(&Anchor::Last) {
                                    add_edge(&mut edges, &mut indegree, j, i);
                                }
                            }
                        }
                    },
                    Anchor::After(t) => match idx_of(&t) {
                        Some(j) => add_edge(&mut edges, &mut indegree, j, i),
                        None => {
                            log::warn!(
                                "phase `{}` anchored after removed phase `{t}`; re-resolving to first",
                                r.name
                            );
                            for (j, other) in self.registered.iter().enumerate() {
                                if j != i && !other.phase.anchors().contains(&Anchor::First) {
                                    add_edge(&mut edges, &mut indegree, i, j);
                                }
                            }
                        }
                    },
                }
            }
        }

        let mut ready: Vec<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let order_key = |i: usize| self.registered[i].order;
        ready.sort_by_key(|&i| std::cmp::Reverse(order_key(i)));
        let mut schedule = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            schedule.push(self.registered[i].name.clone());
            for &j in &edges[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
            ready.sort_by_key(|&i| std::cmp::Reverse(order_key(i)));
        }
        if schedule.len() != n {
            let stuck = (0..n)
                .find(|&i| indegree[i] > 0)
                .map(|i| self.registered[i].name.clone())
                .unwrap_or_default();
            return Err(RegistryError::Unsatisfiable(stuck));
        }
        debug_assert!(self.schedule_satisfied(&schedule));
        self.schedule = schedule;
        self.schedule_version += 1;
        Ok(())
    }

    /// Checker used after every registry mutation: the schedule must honor
    /// every anchor of every registered phase.
    pub fn schedule_satisfied(&self, schedule: &[String]) -> bool {
        let pos = |name: &str| schedule.iter().position(|s| s == name);
        for r in &self.registered {
            let Some(me) = pos(&r.name) else { return false };
            for anchor in r.phase.anchors() {
                let ok = match anchor {
                    Anchor::First => self.registered.iter().all(|o| {
                        o.phase.anchors().contains(&Anchor::First)
                            || pos(&o.name).is_none_or(|p| me <= p)
                    }),
                    Anchor::Last => self.registered.iter().all(|o| {
                        o.phase.anchors().contains(&Anchor::Last)
                            || pos(&o.name).is_none_or(|p| p <= me)
                    }),
                    Anchor::Before(t) => pos(&t).is_none_or(|p| me < p),
                    Anchor::After(t) => pos(&t).is_none_or(|p| p < me),
                };
                if !ok {
                    return false;
                }
            }
        }
        true
    }

    // -- protocol ----------------------------------------------------------

    /// Summed speedup estimate. Never touches IR: priors, running averages,
    /// and history only. Already-applied (and non-profitable) phases
    /// contribute zero.
    pub fn estimate(&self, proc: &str) -> f64 {
        let mut total = 0.0;
        for name in &self.schedule {
            if self.history.entry(proc, name).is_some() {
                continue;
            }
            let r = self.registered.iter().find(|r| r.name == *name).unwrap();
            if !r.phase.attributable() {
                continue;
            }
            total += match self.history.ewma(name) {
                Some(m) => m,
                None => r.phase.prior_speedup(),
            };
        }
        total
    }

    /// Create a freshly optimized image from the transport form.
    pub fn optimize(
        &mut self,
        proc: &str,
        ctx: &PhaseContext,
    ) -> Result<OptimizeOutcome, OptimizeError> {
        let source = ctx
            .vm
            .sources()
            .get(proc)
            .cloned()
            .ok_or_else(|| OptimizeError::NoSource(proc.to_string()))?;
        let mut ir = build_ssa(&source).map_err(|e| OptimizeError::Build(format!("{e:?}")))?;

        let mut newly_applied = Vec::new();
        let mut assumptions = Vec::new();
        for name in self.schedule.clone() {
            // Past measurement below the profitability bar: mark and skip,
            // permanently for this procedure.
            if let Some(e) = self.history.entry_mut(proc, &name) {
                if e.status == Status::NonProfitable {
                    continue;
                }
                if e.last_speedup.is_some_and(|s| s < NON_PROFIT_THRESHOLD) {
                    e.status = Status::NonProfitable;
                    continue;
                }
            }
            let r = self.registered.iter_mut().find(|r| r.name == name).unwrap();
            let snapshot = ir.clone();
            match r.phase.optimize(&mut ir, ctx) {
                Ok(result) => {
                    if result.applied {
                        let first_time = self.history.entry(proc, &name).is_none();
                        let attributable = r.phase.attributable();
                        let assumption = result.assumptions.first().cloned();
                        match self.history.entry_mut(proc, &name) {
                            Some(e) => {
                                e.applications += 1;
                                e.assumption = assumption;
                            }
                            None => {
                                self.per_proc_push(
                                    proc,
                                    HistoryEntry {
                                        phase: name.clone(),
                                        status: Status::Applied,
                                        last_speedup: None,
                                        applications: 1,
                                        assumption,
                                    },
                                );
                            }
                        }
                        if first_time && attributable {
                            newly_applied.push(name.clone());
                        }
                        assumptions.extend(result.assumptions);
                    }
                }
                Err(failure) => {
                    log::warn!("optimize {proc}: {failure}; changes discarded");
                    ir = snapshot;
                }
            }
        }

        let mut image = lower_image(&ir);
        image.origin = Origin::Optimizer;
        image.schedule_version = self.schedule_version;
        Ok(OptimizeOutcome { image, newly_applied, assumptions })
    }

    /// Pessimistic recompilation from history: re-apply exactly the applied
    /// entries, skip non-profitable ones, decide nothing new.
    pub fn recompile(
        &mut self,
        proc: &str,
        ctx: &PhaseContext,
    ) -> Result<OptimizeOutcome, OptimizeError> {
        let source = ctx
            .vm
            .sources()
            .get(proc)
            .cloned()
            .ok_or_else(|| OptimizeError::NoSource(proc.to_string()))?;
        let mut ir = build_ssa(&source).map_err(|e| OptimizeError::Build(format!("{e:?}")))?;

        let mut assumptions = Vec::new();
        for name in self.schedule.clone() {
            let applied = matches!(
                self.history.entry(proc, &name),
                Some(HistoryEntry { status: Status::Applied, .. })
            );
            let r = self.registered.iter_mut().find(|r| r.name == name).unwrap();
            if !applied && !r.phase.recompiles_without_history() {
                continue;
            }
            let snapshot = ir.clone();
            match r.phase.recompile(&mut ir, ctx) {
                Ok(result) => {
                    if result.applied {
                        if let Some(e) = self.history.entry_mut(proc, &name) {
                            e.assumption = result.assumptions.first().cloned();
                        }
                        assumptions.extend(result.assumptions);
                    }
                }
                Err(failure) => {
                    log::warn!("recompile {proc}: {failure}; changes discarded");
                    ir = snapshot;
                }
            }
        }
        // Historically applied phases that are no longer registered are
        // skipped; warn so the gap is visible.
        for e in self.history.entries(proc) {
            if e.status == Status::Applied
                && !self.registered.iter().any(|r| r.name == e.phase)
            {
                log::warn!(
                    "recompile {proc}: phase `{}` in history but not registered; skipped",
                    e.phase
                );
            }
        }

        let mut image = lower_image(&ir);
        image.origin = Origin::Optimizer;
        image.schedule_version = self.schedule_version;
        Ok(OptimizeOutcome { image, newly_applied: Vec::new(), assumptions })
    }

    fn per_proc_push(&mut self, proc: &str, entry: HistoryEntry) {
        self.history.per_proc.entry(proc.to_string()).or_default().push(entry);
    }

    /// Fold a measured speedup into the phases newly applied by the last
    /// optimize pass: equal split, per-phase running average, per-procedure
    /// history entry.
    pub fn measure_and_attribute(
        &mut self,
        proc: &str,
        old_mean_self_cost: f64,
        new_mean_self_cost: f64,
        newly_applied: &[String],
    ) {
        if old_mean_self_cost == 0.0 || newly_applied.is_empty() {
            return;
        }
        let speedup = (old_mean_self_cost - new_mean_self_cost) / old_mean_self_cost;
        let share = speedup / newly_applied.len() as f64;
        for name in newly_applied {
            self.history.fold_measurement(name, share);
            if let Some(e) = self.history.entry_mut(proc, name) {
                e.last_speedup = Some(share);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dummy {
        name: String,
        anchors: Vec<Anchor>,
        prior: f64,
    }

    impl OptimizationPhase for Dummy {
        fn name(&self) -> &str {
            &self.name
        }
        fn anchors(&self) -> Vec<Anchor> {
            self.anchors.clone()
        }
        fn prior_speedup(&self) -> f64 {
            self.prior
        }
        fn optimize(
            &mut self,
            _ir: &mut ProcedureIR,
            _ctx: &PhaseContext,
        ) -> Result<PhaseResult, PhaseFailure> {
            Ok(PhaseResult { applied: true, assumptions: Vec::new() })
        }
    }

    fn dummy(name: &str, anchors: Vec<Anchor>, prior: f64) -> Box<Dummy> {
        Box::new(Dummy { name: name.into(), anchors, prior })
    }

    #[test]
    fn anchors_order_schedule() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("dce", vec![Anchor::Last], 0.02)).unwrap();
        sys.register_phase(dummy("cse", vec![Anchor::Before("dce".into())], 0.20))
            .unwrap();
        sys.register_phase(dummy("constfold", vec![Anchor::First], 0.05)).unwrap();
        assert_eq!(sys.schedule(), ["constfold", "cse", "dce"]);
    }

    #[test]
    fn registration_order_breaks_ties() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("base", vec![], 0.1)).unwrap();
        sys.register_phase(dummy("a", vec![Anchor::After("base".into())], 0.1)).unwrap();
        sys.register_phase(dummy("b", vec![Anchor::After("base".into())], 0.1)).unwrap();
        assert_eq!(sys.schedule(), ["base", "a", "b"]);
    }

    #[test]
    fn unknown_anchor_rejected() {
        let mut sys = OptimizationSystem::new();
        assert!(matches!(
            sys.register_phase(dummy("x", vec![Anchor::After("ghost".into())], 0.1)),
            Err(RegistryError::UnknownAnchor(_, _))
        ));
    }

    #[test]
    fn cyclic_anchors_rejected() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("a", vec![], 0.1)).unwrap();
        sys.register_phase(dummy("b", vec![Anchor::After("a".into())], 0.1)).unwrap();
        // Replacing `a` with a phase that must come after `b` closes a cycle.
        let err = sys.replace_phase("a", dummy("a", vec![Anchor::After("b".into())], 0.1));
        assert!(matches!(err, Err(RegistryError::Unsatisfiable(_))));
    }

    #[test]
    fn orphaned_anchor_reresolves() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("base", vec![], 0.1)).unwrap();
        sys.register_phase(dummy("tail", vec![Anchor::After("base".into())], 0.1))
            .unwrap();
        sys.remove_phase("base").unwrap();
        assert_eq!(sys.schedule(), ["tail"]);
    }

    #[test]
    fn estimate_sums_priors_and_zeroes_applied() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("cse", vec![], 0.20)).unwrap();
        sys.register_phase(dummy("prefetch", vec![], 0.05)).unwrap();
        assert!((sys.estimate("fresh") - 0.25).abs() < 1e-12);

        sys.per_proc_push(
            "done",
            HistoryEntry {
                phase: "cse".into(),
                status: Status::Applied,
                last_speedup: None,
                applications: 1,
                assumption: None,
            },
        );
        assert!((sys.estimate("done") - 0.05).abs() < 1e-12);
        sys.per_proc_push(
            "done",
            HistoryEntry {
                phase: "prefetch".into(),
                status: Status::Applied,
                last_speedup: None,
                applications: 1,
                assumption: None,
            },
        );
        assert_eq!(sys.estimate("done"), 0.0);
    }

    #[test]
    fn estimate_uses_ewma_after_measurement() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("cse", vec![], 0.20)).unwrap();
        sys.measure_and_attribute("p", 100.0, 90.0, &["cse".to_string()]);
        // First measurement replaces the prior outright.
        assert!((sys.estimate("fresh") - 0.10).abs() < 1e-12);
        sys.measure_and_attribute("p", 100.0, 100.0, &["cse".to_string()]);
        // EWMA: 0.3 * 0.0 + 0.7 * 0.10
        assert!((sys.estimate("fresh") - 0.07).abs() < 1e-12);
    }

    #[test]
    fn attribution_splits_equally() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("a", vec![], 0.1)).unwrap();
        sys.register_phase(dummy("b", vec![], 0.1)).unwrap();
        sys.per_proc_push(
            "p",
            HistoryEntry {
                phase: "a".into(),
                status: Status::Applied,
                last_speedup: None,
                applications: 1,
                assumption: None,
            },
        );
        sys.per_proc_push(
            "p",
            HistoryEntry {
                phase: "b".into(),
                status: Status::Applied,
                last_speedup: None,
                applications: 1,
                assumption: None,
            },
        );
        sys.measure_and_attribute("p", 100.0, 90.0, &["a".to_string(), "b".to_string()]);
        assert_eq!(sys.history.entry("p", "a").unwrap().last_speedup, Some(0.05));
        assert_eq!(sys.history.entry("p", "b").unwrap().last_speedup, Some(0.05));
    }

    #[test]
    fn zero_old_cost_skips_attribution() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("a", vec![], 0.1)).unwrap();
        sys.measure_and_attribute("p", 0.0, 5.0, &["a".to_string()]);
        assert_eq!(sys.history.ewma("a"), None);
    }

    #[test]
    fn ewma_survives_deregistration() {
        let mut sys = OptimizationSystem::new();
        sys.register_phase(dummy("a", vec![], 0.1)).unwrap();
        sys.measure_and_attribute("p", 100.0, 80.0, &["a".to_string()]);
        sys.remove_phase("a").unwrap();
        sys.register_phase(dummy("a", vec![], 0.1)).unwrap();
        assert!((sys.estimate("fresh") - 0.20).abs() < 1e-12);
    }
}
