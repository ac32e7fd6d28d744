//! Hot code replacement: instantaneous reference translation over globals,
//! the object store, and activation frames, plus the assumption registry
//! that drives de-optimization when a speculative binding is overwritten.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::optimizer::{OptimizationSystem, PhaseContext};
use crate::profiling::{ProfilingSystem, SharedRegistry};
use crate::vm::{ProcedureHandle, SlotRegion, Value, Vm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslationTuple {
    pub old: ProcedureHandle,
    pub new: ProcedureHandle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapReport {
    pub proc: String,
    pub tuple: TranslationTuple,
    pub globals: usize,
    pub store: usize,
    pub frames: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplaceError {
    #[error("old and new handles are identical")]
    SameHandle,
    #[error("new handle does not resolve to an image")]
    UnknownNewHandle,
    #[error("procedure `{0}` has active frames; swap refused")]
    StillActive(String),
}

/// True iff no activation frame is executing the procedure's current image.
pub fn can_replace(vm: &Vm, proc: &str) -> bool {
    match vm.lookup_procedure(proc) {
        Some(handle) => !vm.active_handles().contains(&handle),
        None => true,
    }
}

/// Rewrite every occurrence of the old handle to the new one — globals,
/// every object field, every frame register — rebind the procedure table,
/// and discard the old image. Must run at a safe point.
pub fn replace(
    vm: &mut Vm,
    assumptions: &mut AssumptionRegistry,
    proc: &str,
    tuple: TranslationTuple,
) -> Result<SwapReport, ReplaceError> {
    if tuple.old == tuple.new {
        return Err(ReplaceError::SameHandle);
    }
    if vm.image(tuple.new).is_none() {
        return Err(ReplaceError::UnknownNewHandle);
    }
    if vm.active_handles().contains(&tuple.old) {
        return Err(ReplaceError::StillActive(proc.to_string()));
    }

    let (mut globals, mut store, mut frames) = (0usize, 0usize, 0usize);
    vm.for_each_proc_slot(|region, h| {
        if *h == tuple.old {
            *h = tuple.new;
            match region {
                SlotRegion::Globals => globals += 1,
                SlotRegion::Store => store += 1,
                SlotRegion::Frames => frames += 1,
            }
        }
    });
    vm.rebind(proc, tuple.new);
    vm.discard_image(tuple.old);
    // Assumption keys that expected the old handle keep meaning "the
    // binding this image was optimized against"; translate them too.
    assumptions.translate_handle(tuple.old, tuple.new);

    debug_assert_eq!(vm.count_handle_occurrences(tuple.old), 0);
    debug_assert!(vm.dangling_proc_refs().is_empty());

    vm.trace_event(&format!(
        "event=swap proc={proc} old={} new={} globals={globals} store={store} frames={frames}",
        tuple.old, tuple.new
    ));
    Ok(SwapReport { proc: proc.to_string(), tuple, globals, store, frames })
}

// ---------------------------------------------------------------------------
// Assumption registry
// ---------------------------------------------------------------------------

/// Speculative dependencies: (global, expected handle) -> dependent
/// procedures whose images bake in that binding.
#[derive(Debug, Default)]
pub struct AssumptionRegistry {
    map: BTreeMap<(String, ProcedureHandle), BTreeSet<String>>,
}

impl AssumptionRegistry {
    pub fn register(&mut self, global: &str, expected: ProcedureHandle, dependent: &str) {
        self.map
            .entry((global.to_string(), expected))
            .or_default()
            .insert(dependent.to_string());
    }

    pub fn dependents(&self, global: &str, expected: ProcedureHandle) -> Vec<String> {
        self.map
            .get(&(global.to_string(), expected))
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn keys(&self) -> Vec<(String, ProcedureHandle)> {
        self.map.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn translate_handle(&mut self, old: ProcedureHandle, new: ProcedureHandle) {
        let moved: Vec<_> = self
            .map
            .keys()
            .filter(|(_, h)| *h == old)
            .cloned()
            .collect();
        for key in moved {
            let deps = self.map.remove(&key).unwrap();
            self.map.entry((key.0, new)).or_default().extend(deps);
        }
    }

    fn remove_key(&mut self, global: &str, expected: ProcedureHandle) {
        self.map.remove(&(global.to_string(), expected));
    }

    /// Keys guarding a given global.
    pub fn keys_for_global(&self, global: &str) -> Vec<ProcedureHandle> {
        self.map
            .keys()
            .filter(|(g, _)| g == global)
            .map(|(_, h)| *h)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Invalidation (de-optimization)
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct InvalidationReport {
    /// Dependents recompiled, in name order.
    pub recompiled: Vec<String>,
    /// Swaps completed during invalidation.
    pub swapped: Vec<SwapReport>,
    /// Swaps that had to wait for frames to drain; the caller retries them
    /// at later safe points.
    pub deferred: Vec<(String, TranslationTuple)>,
}

/// Undo every speculative binding broken by writing `new_value` into
/// `global`. Must run before the write becomes visible to execution.
///
/// For each violated key: the dependents' history entries for that
/// assumption are deleted, each dependent is pessimistically recompiled
/// (yielding an image without the stale direct binding), and the new image
/// is swapped in at the earliest legal safe point. Dependents with live
/// frames finish on their pinned image; their swap is deferred.
#[allow(clippy::too_many_arguments)]
pub fn invalidate(
    vm: &mut Vm,
    assumptions: &mut AssumptionRegistry,
    optimizer: &mut OptimizationSystem,
    profiles: &ProfilingSystem,
    registry: &SharedRegistry,
    global: &str,
    new_value: &Value,
) -> InvalidationReport {
    let mut report = InvalidationReport::default();
    let new_handle = match new_value {
        Value::Proc(h) => Some(*h),
        _ => None,
    };

    for expected in assumptions.keys_for_global(global) {
        if Some(expected) == new_handle {
            continue; // storing the same binding breaks nothing
        }
        let dependents = assumptions.dependents(global, expected);
        optimizer.history.remove_assumption_entries(global, expected);
        assumptions.remove_key(global, expected);
        vm.trace_event(&format!(
            "event=invalidate global={global} expected={expected} dependents={}",
            dependents.join(",")
        ));

        for proc in dependents {
            let outcome = {
                let ctx = PhaseContext { vm, profiles, registry };
                match optimizer.recompile(&proc, &ctx) {
                    Ok(o) => o,
                    Err(e) => {
                        log::warn!("invalidate: recompile {proc} failed: {e}");
                        continue;
                    }
                }
            };
            let Some(old) = vm.lookup_procedure(&proc) else { continue };
            let new = vm.stage_image(outcome.image);
            for a in &outcome.assumptions {
                assumptions.register(&a.global, a.expected, &proc);
            }
            report.recompiled.push(proc.clone());
            let tuple = TranslationTuple { old, new };
            match replace(vm, assumptions, &proc, tuple) {
                Ok(swap) => report.swapped.push(swap),
                Err(ReplaceError::StillActive(_)) => {
                    report.deferred.push((proc.clone(), tuple))
                }
                Err(e) => log::warn!("invalidate: swap of {proc} failed: {e}"),
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::load_module;
    use crate::transport::parse_transport;

    fn vm_with(text: &str) -> Vm {
        let m = parse_transport(text).unwrap();
        let mut vm = Vm::new();
        load_module(&m, &mut vm).unwrap();
        vm
    }

    fn reload_image(vm: &mut Vm, proc: &str) -> TranslationTuple {
        // Stage a recompiled copy of the same procedure as the "new" image.
        let source = vm.sources().get(proc).unwrap().clone();
        let ir = crate::ir::build_ssa(&source).unwrap();
        let image = crate::loader::lower_image(&ir);
        let old = vm.lookup_procedure(proc).unwrap();
        let new = vm.stage_image(image);
        TranslationTuple { old, new }
    }

    #[test]
    fn sweep_rewrites_globals_store_and_reports() {
        let mut vm = vm_with(
            "module m\nglobal g1 = &f\nglobal g2 = &f\n\
             proc f nparams 0\nblock b0\n  v = const 1\n  ret v\n\
             proc main nparams 0 entry\nblock b0\n  o = new_obj 1\n  h = proc_ref f\n  store_field o 0 h\n  r = call f ()\n  ret r\n",
        );
        vm.invoke("main", vec![]).unwrap(); // populate one object field
        let mut assumptions = AssumptionRegistry::default();
        let tuple = reload_image(&mut vm, "f");
        let report = replace(&mut vm, &mut assumptions, "f", tuple).unwrap();
        assert_eq!(report.globals, 2);
        assert_eq!(report.store, 1);
        assert_eq!(report.frames, 0);
        assert_eq!(vm.lookup_procedure("f"), Some(tuple.new));
        assert_eq!(vm.count_handle_occurrences(tuple.old), 0);
        // The program still runs through the swapped procedure.
        assert_eq!(vm.invoke("main", vec![]).unwrap(), Value::Int(1));
    }

    #[test]
    fn swap_refused_while_frame_active() {
        let mut vm = vm_with(
            "module m\n\
             proc f nparams 1 entry\n\
             block b0\n  i = const 0\n  br loop\n\
             block loop\n  one = const 1\n  i = add i one\n  c = cmp_lt i p0\n  br_if c loop exit\n\
             block exit\n  ret i\n",
        );
        vm.start("f", vec![Value::Int(100)]).unwrap();
        vm.run_until_safepoint().unwrap(); // inside f now
        assert!(!can_replace(&vm, "f"));
        let mut assumptions = AssumptionRegistry::default();
        let tuple = reload_image(&mut vm, "f");
        assert!(matches!(
            replace(&mut vm, &mut assumptions, "f", tuple),
            Err(ReplaceError::StillActive(_))
        ));
        // Drain the task, then the swap succeeds.
        loop {
            let r = vm.run_until_safepoint().unwrap();
            if let Some(v) = r.completed {
                assert_eq!(v, Value::Int(100));
                break;
            }
        }
        assert!(can_replace(&vm, "f"));
        replace(&mut vm, &mut assumptions, "f", tuple).unwrap();
    }

    #[test]
    fn same_handle_and_unknown_handle_rejected() {
        let mut vm = vm_with(
            "module m\nproc f nparams 0 entry\nblock b0\n  v = const 1\n  ret v\n",
        );
        let mut assumptions = AssumptionRegistry::default();
        let h = vm.lookup_procedure("f").unwrap();
        assert_eq!(
            replace(&mut vm, &mut assumptions, "f", TranslationTuple { old: h, new: h }),
            Err(ReplaceError::SameHandle)
        );
    }

    #[test]
    fn registry_is_idempotent_and_accumulates() {
        let mut reg = AssumptionRegistry::default();
        let mut vm = vm_with(
            "module m\nproc f nparams 0 entry\nblock b0\n  v = const 1\n  ret v\n",
        );
        let h = vm.lookup_procedure("f").unwrap();
        let _ = &mut vm;
        reg.register("g", h, "p");
        reg.register("g", h, "p");
        assert_eq!(reg.dependents("g", h), vec!["p".to_string()]);
        reg.register("g", h, "q");
        assert_eq!(reg.dependents("g", h), vec!["p".to_string(), "q".to_string()]);
    }

    #[test]
    fn frames_region_swept_for_pinned_references() {
        // main holds a proc_ref to f in a register while f is idle; a swap
        // of f must rewrite main's register.
        let mut vm = vm_with(
            "module m\n\
             proc f nparams 0\nblock b0\n  v = const 7\n  ret v\n\
             proc main nparams 0 entry\n\
             block b0\n  h = proc_ref f\n  r = call_indirect h ()\n  s = call_indirect h ()\n  x = add r s\n  ret x\n",
        );
        vm.start("main", vec![]).unwrap();
        // Advance until the first call_indirect returned (one Call + one
        // Return safepoint).
        let mut returns = 0;
        while returns < 1 {
            let r = vm.run_until_safepoint().unwrap();
            if r.kind == crate::vm::SafepointKind::Return {
                returns += 1;
            }
        }
        let mut assumptions = AssumptionRegistry::default();
        let tuple = reload_image(&mut vm, "f");
        let report = replace(&mut vm, &mut assumptions, "f", tuple).unwrap();
        assert_eq!(report.frames, 1);
        // Finish: the second indirect call goes through the new handle.
        loop {
            let r = vm.run_until_safepoint().unwrap();
            if let Some(v) = r.completed {
                assert_eq!(v, Value::Int(14));
                break;
            }
        }
    }

    #[test]
    fn translate_handle_moves_assumption_keys() {
        let mut reg = AssumptionRegistry::default();
        let mut vm = vm_with(
            "module m\nglobal g = &f\n\
             proc f nparams 0 entry\nblock b0\n  v = const 1\n  ret v\n",
        );
        let old = vm.lookup_procedure("f").unwrap();
        reg.register("g", old, "caller");
        let tuple = reload_image(&mut vm, "f");
        replace(&mut vm, &mut reg, "f", tuple).unwrap();
        assert!(reg.dependents("g", tuple.old).is_empty());
        assert_eq!(reg.dependents("g", tuple.new), vec!["caller".to_string()]);
    }
}
