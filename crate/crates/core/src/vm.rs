//! Deterministic interpreter for executable images: activation frames, a
//! managed object store, procedure handles, safe points (every call, return,
//! and back edge), a virtual clock, and hooks for sampling and counters.
//!
//! Handles are the only way code or data refers to a procedure. A frame pins
//! the image it started on; replacement of a procedure never migrates an
//! active frame.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::loader::{ExecImage, MInst, ModuleStore, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProcedureHandle(u64);

impl fmt::Display for ProcedureHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Obj(ObjRef),
    Proc(ProcedureHandle),
}

impl Value {
    fn truthy(&self) -> bool {
        !matches!(self, Value::Int(0))
    }
}

#[derive(Debug, Default)]
pub struct Store {
    objects: Vec<Vec<Value>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PerfStats {
    pub invocations: u64,
    /// Instructions executed in the procedure itself, excluding
    /// instrumentation (`profile_inc` and path updates).
    pub self_cost: u64,
    pub inclusive_cost: u64,
}

impl PerfStats {
    pub fn mean_self_cost(&self) -> Option<f64> {
        (self.invocations > 0).then(|| self.self_cost as f64 / self.invocations as f64)
    }
}

#[derive(Debug)]
pub struct ActivationFrame {
    pub handle: ProcedureHandle,
    /// Image identity captured at call; fixed for the frame's lifetime.
    pub image: Rc<ExecImage>,
    pub pc: usize,
    pub registers: Vec<Value>,
    path_register: u64,
    self_cost: u64,
    child_cost: u64,
    dest_in_caller: Option<Reg>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub clock: u64,
    pub proc: String,
    pub block: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SafepointKind {
    Call,
    Return,
    BackEdge,
}

#[derive(Debug, Clone)]
pub struct SafepointReport {
    pub kind: SafepointKind,
    pub clock: u64,
    /// Handles referenced by any activation frame, so the manager can test
    /// replaceability.
    pub active_handles: HashSet<ProcedureHandle>,
    pub completed: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Ran,
    Safepoint(SafepointKind),
    /// A store to a guarded global is pending; the write has not happened
    /// yet. Resolve assumptions, then call `resume_after_guard`.
    GuardedStore { global: String, value: Value },
    Done(Value),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VmError {
    #[error("trap: division by zero in `{proc}` at pc {pc}")]
    DivByZero { proc: String, pc: usize },
    #[error("trap: field {index} out of range in `{proc}` at pc {pc}")]
    FieldOutOfRange { proc: String, pc: usize, index: u32 },
    #[error("trap: call through non-procedure value in `{proc}` at pc {pc}")]
    NotAProcedure { proc: String, pc: usize },
    #[error("trap: `{proc}` expects {expected} arguments, got {got}")]
    ArityMismatch { proc: String, expected: u32, got: usize },
    #[error("unknown procedure `{0}`")]
    UnknownProcedure(String),
    #[error("unknown global `{0}`")]
    UnknownGlobal(String),
    #[error("dangling procedure handle {0}")]
    DanglingHandle(ProcedureHandle),
    #[error("no runnable task")]
    NoTask,
}

pub struct Vm {
    procedure_table: HashMap<String, ProcedureHandle>,
    handle_table: HashMap<ProcedureHandle, Rc<ExecImage>>,
    globals: HashMap<String, Value>,
    store: Store,
    frames: Vec<ActivationFrame>,
    pub virtual_clock: u64,
    next_handle: u64,
    counters: Vec<u64>,
    sample_period: Option<u64>,
    samples: Vec<Sample>,
    stats: HashMap<String, PerfStats>,
    trace: Vec<String>,
    trace_calls: bool,
    guarded_globals: HashSet<String>,
    resume_store: bool,
    sources: ModuleStore,
    loaded_modules: HashSet<String>,
    entry: Option<String>,
}

impl Default for Vm {
    fn default() -> Self {
        Self::new()
    }
}

impl Vm {
    pub fn new() -> Self {
        Vm {
            procedure_table: HashMap::new(),
            handle_table: HashMap::new(),
            globals: HashMap::new(),
            store: Store::default(),
            frames: Vec::new(),
            virtual_clock: 0,
            next_handle: 1,
            counters: Vec::new(),
            sample_period: None,
            samples: Vec::new(),
            stats: HashMap::new(),
            trace: Vec::new(),
            trace_calls: true,
            guarded_globals: HashSet::new(),
            resume_store: false,
            sources: ModuleStore::default(),
            loaded_modules: HashSet::new(),
            entry: None,
        }
    }

    // -- tables ------------------------------------------------------------

    pub fn module_loaded(&self, name: &str) -> bool {
        self.loaded_modules.contains(name)
    }

    pub fn register_module(&mut self, name: &str) {
        self.loaded_modules.insert(name.to_string());
    }

    pub fn has_procedure(&self, name: &str) -> bool {
        self.procedure_table.contains_key(name)
    }

    pub fn has_global(&self, name: &str) -> bool {
        self.globals.contains_key(name)
    }

    pub fn lookup_procedure(&self, name: &str) -> Option<ProcedureHandle> {
        self.procedure_table.get(name).copied()
    }

    pub fn procedure_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.procedure_table.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn image(&self, handle: ProcedureHandle) -> Option<&ExecImage> {
        self.handle_table.get(&handle).map(Rc::as_ref)
    }

    pub fn image_of(&self, proc: &str) -> Option<&ExecImage> {
        self.lookup_procedure(proc).and_then(|h| self.image(h))
    }

    /// Register a new image under a fresh handle and bind its name.
    pub fn install_procedure(&mut self, image: ExecImage) -> ProcedureHandle {
        let handle = ProcedureHandle(self.next_handle);
        self.next_handle += 1;
        self.procedure_table.insert(image.proc_name.clone(), handle);
        self.handle_table.insert(handle, Rc::new(image));
        handle
    }

    /// Register a replacement image without touching the name binding yet;
    /// the replacer rebinds after its sweep.
    pub fn stage_image(&mut self, image: ExecImage) -> ProcedureHandle {
        let handle = ProcedureHandle(self.next_handle);
        self.next_handle += 1;
        self.handle_table.insert(handle, Rc::new(image));
        handle
    }

    pub fn rebind(&mut self, proc: &str, handle: ProcedureHandle) {
        self.procedure_table.insert(proc.to_string(), handle);
    }

    pub fn discard_image(&mut self, handle: ProcedureHandle) {
        self.handle_table.remove(&handle);
    }

    pub fn define_global(&mut self, name: String, value: Value) {
        self.globals.insert(name, value);
    }

    pub fn global(&self, name: &str) -> Option<&Value> {
        self.globals.get(name)
    }

    pub fn set_entry(&mut self, _module: &str, proc: &str) {
        self.entry = Some(proc.to_string());
    }

    pub fn entry(&self) -> Option<&str> {
        self.entry.as_deref()
    }

    pub fn sources(&self) -> &ModuleStore {
        &self.sources
    }

    pub fn sources_mut(&mut self) -> &mut ModuleStore {
        &mut self.sources
    }

    // -- hooks -------------------------------------------------------------

    pub fn set_sample_period(&mut self, period: Option<u64>) {
        self.sample_period = period;
    }

    pub fn take_samples(&mut self) -> Vec<Sample> {
        std::mem::take(&mut self.samples)
    }

    pub fn counter(&self, cid: u32) -> u64 {
        self.counters.get(cid as usize).copied().unwrap_or(0)
    }

    pub fn set_trace_calls(&mut self, on: bool) {
        self.trace_calls = on;
    }

    pub fn guard_global(&mut self, name: &str) {
        self.guarded_globals.insert(name.to_string());
    }

    pub fn unguard_global(&mut self, name: &str) {
        self.guarded_globals.remove(name);
    }

    pub fn resume_after_guard(&mut self) {
        self.resume_store = true;
    }

    pub fn trace_event(&mut self, body: &str) {
        self.trace.push(format!("{} {}", self.virtual_clock, body));
    }

    pub fn trace_lines(&self) -> &[String] {
        &self.trace
    }

    pub fn snapshot_stats(&self, proc: &str) -> Result<PerfStats, VmError> {
        if !self.has_procedure(proc) {
            return Err(VmError::UnknownProcedure(proc.to_string()));
        }
        Ok(self.stats.get(proc).copied().unwrap_or_default())
    }

    // -- replacement support ----------------------------------------------

    pub fn active_handles(&self) -> HashSet<ProcedureHandle> {
        self.frames.iter().map(|f| f.handle).collect()
    }

    pub fn has_frames(&self) -> bool {
        !self.frames.is_empty()
    }

    pub fn frame_depth(&self) -> usize {
        self.frames.len()
    }

    /// Visit every procedure-reference slot: globals, all object fields, and
    /// every frame register. The sweep and the debug scans both ride on this.
    pub fn for_each_proc_slot(&mut self, mut f: impl FnMut(SlotRegion, &mut ProcedureHandle)) {
        let mut names: Vec<String> = self.globals.keys().cloned().collect();
        names.sort();
        for name in names {
            if let Some(Value::Proc(h)) = self.globals.get_mut(&name) {
                f(SlotRegion::Globals, h);
            }
        }
        for obj in &mut self.store.objects {
            for v in obj.iter_mut() {
                if let Value::Proc(h) = v {
                    f(SlotRegion::Store, h);
                }
            }
        }
        for frame in &mut self.frames {
            for v in frame.registers.iter_mut() {
                if let Value::Proc(h) = v {
                    f(SlotRegion::Frames, h);
                }
            }
        }
    }

    /// Debug scan: every reachable proc-ref must resolve in the handle table.
    pub fn dangling_proc_refs(&mut self) -> Vec<ProcedureHandle> {
        let table: HashSet<ProcedureHandle> = self.handle_table.keys().copied().collect();
        let mut dangling = Vec::new();
        self.for_each_proc_slot(|_, h| {
            if !table.contains(h) {
                dangling.push(*h);
            }
        });
        dangling
    }

    /// Debug scan: count occurrences of a specific handle anywhere.
    pub fn count_handle_occurrences(&mut self, handle: ProcedureHandle) -> usize {
        let mut n = 0;
        self.for_each_proc_slot(|_, h| {
            if *h == handle {
                n += 1;
            }
        });
        n
    }

    // -- execution ---------------------------------------------------------

    /// Push the initial activation frame for a task.
    pub fn start(&mut self, proc: &str, args: Vec<Value>) -> Result<(), VmError> {
        let handle = self
            .lookup_procedure(proc)
            .ok_or_else(|| VmError::UnknownProcedure(proc.to_string()))?;
        self.push_frame(handle, args, None)
    }

    /// Run a procedure to completion. Convenience for tests and one-shot
    /// invocations; guarded stores are executed without invalidation here
    /// (the system driver handles them properly).
    pub fn invoke(&mut self, proc: &str, args: Vec<Value>) -> Result<Value, VmError> {
        self.start(proc, args)?;
        loop {
            match self.step()? {
                Step::Done(v) => return Ok(v),
                Step::GuardedStore { .. } => self.resume_after_guard(),
                _ => {}
            }
        }
    }

    /// Execute until the next safe point (call, return, back edge) or task
    /// completion.
    pub fn run_until_safepoint(&mut self) -> Result<SafepointReport, VmError> {
        if self.frames.is_empty() {
            return Err(VmError::NoTask);
        }
        loop {
            match self.step()? {
                Step::Ran => {}
                Step::Safepoint(kind) => {
                    return Ok(SafepointReport {
                        kind,
                        clock: self.virtual_clock,
                        active_handles: self.active_handles(),
                        completed: None,
                    });
                }
                Step::Done(v) => {
                    return Ok(SafepointReport {
                        kind: SafepointKind::Return,
                        clock: self.virtual_clock,
                        active_handles: HashSet::new(),
                        completed: Some(v),
                    });
                }
                Step::GuardedStore { .. } => {
                    // Without a driver there is nothing to invalidate.
                    self.resume_after_guard();
                }
            }
        }
    }

    fn push_frame(
        &mut self,
        handle: ProcedureHandle,
        args: Vec<Value>,
        dest_in_caller: Option<Reg>,
    ) -> Result<(), VmError> {
        let image = self
            .handle_table
            .get(&handle)
            .cloned()
            .ok_or(VmError::DanglingHandle(handle))?;
        if image.param_count as usize != args.len() {
            return Err(VmError::ArityMismatch {
                proc: image.proc_name.clone(),
                expected: image.param_count,
                got: args.len(),
            });
        }
        let mut registers = vec![Value::Int(0); image.register_count as usize];
        registers[..args.len()].copy_from_slice(&args);
        let stats = self.stats.entry(image.proc_name.clone()).or_default();
        stats.invocations += 1;
        if self.trace_calls {
            let body = format!("event=invoke proc={}", image.proc_name);
            self.trace.push(format!("{} {}", self.virtual_clock, body));
        }
        self.frames.push(ActivationFrame {
            handle,
            image,
            pc: 0,
            registers,
            path_register: 0,
            self_cost: 0,
            child_cost: 0,
            dest_in_caller,
        });
        Ok(())
    }

    fn pop_frame(&mut self, result: Value) -> Step {
        let frame = self.frames.pop().expect("frame");
        let proc = frame.image.proc_name.clone();
        let total = frame.self_cost + frame.child_cost;
        {
            let stats = self.stats.entry(proc.clone()).or_default();
            stats.self_cost += frame.self_cost;
            stats.inclusive_cost += total;
        }
        if self.trace_calls {
            self.trace.push(format!("{} event=return proc={}", self.virtual_clock, proc));
        }
        match self.frames.last_mut() {
            Some(parent) => {
                parent.child_cost += total;
                if let Some(dest) = frame.dest_in_caller {
                    parent.registers[dest as usize] = result;
                }
                Step::Safepoint(SafepointKind::Return)
            }
            None => Step::Done(result),
        }
    }

    fn tick(&mut self, counts_self: bool) {
        self.virtual_clock += 1;
        if counts_self {
            if let Some(frame) = self.frames.last_mut() {
                frame.self_cost += 1;
            }
        }
        if let Some(period) = self.sample_period {
            if period > 0 && self.virtual_clock % period == 0 {
                if let Some(frame) = self.frames.last() {
                    let proc = frame.image.proc_name.clone();
                    let block = frame.image.label_at(frame.pc).to_string();
                    self.samples.push(Sample {
                        clock: self.virtual_clock,
                        proc: proc.clone(),
                        block: block.clone(),
                    });
                    self.trace.push(format!(
                        "{} event=sample proc={} block={}",
                        self.virtual_clock, proc, block
                    ));
                }
            }
        }
    }

    /// Execute one instruction.
    pub fn step(&mut self) -> Result<Step, VmError> {
        let frame = self.frames.last().ok_or(VmError::NoTask)?;
        let pc = frame.pc;
        let image = Rc::clone(&frame.image);
        let inst = image.instructions[pc].clone();
        let proc = || image.proc_name.clone();

        match inst {
            MInst::Const { dest, value } => {
                self.cur().registers[dest as usize] = Value::Int(value);
                self.advance();
                self.tick(true);
            }
            MInst::Bin { dest, op, lhs, rhs } => {
                let a = self.int_at(lhs, &proc(), pc)?;
                let b = self.int_at(rhs, &proc(), pc)?;
                let v = op.eval(a, b).map_err(|_| VmError::DivByZero { proc: proc(), pc })?;
                self.cur().registers[dest as usize] = Value::Int(v);
                self.advance();
                self.tick(true);
            }
            MInst::Copy { dest, src } => {
                let v = self.cur().registers[src as usize];
                self.cur().registers[dest as usize] = v;
                self.advance();
                self.tick(true);
            }
            MInst::ProcRef { dest, proc: name } => {
                let h = self
                    .lookup_procedure(&name)
                    .ok_or_else(|| VmError::UnknownProcedure(name.clone()))?;
                self.cur().registers[dest as usize] = Value::Proc(h);
                self.advance();
                self.tick(true);
            }
            MInst::LoadGlobal { dest, global } => {
                let v = *self
                    .globals
                    .get(&global)
                    .ok_or_else(|| VmError::UnknownGlobal(global.clone()))?;
                self.cur().registers[dest as usize] = v;
                self.advance();
                self.tick(true);
            }
            MInst::StoreGlobal { global, src } => {
                let v = self.cur().registers[src as usize];
                if self.guarded_globals.contains(&global) && !self.resume_store {
                    return Ok(Step::GuardedStore { global, value: v });
                }
                self.resume_store = false;
                if !self.globals.contains_key(&global) {
                    return Err(VmError::UnknownGlobal(global));
                }
                self.globals.insert(global, v);
                self.advance();
                self.tick(true);
            }
            MInst::NewObj { dest, fields } => {
                let idx = self.store.objects.len();
                self.store.objects.push(vec![Value::Int(0); fields as usize]);
                self.cur().registers[dest as usize] = Value::Obj(ObjRef(idx));
                self.advance();
                self.tick(true);
            }
            MInst::LoadField { dest, obj, index } => {
                let v = self.field(obj, index, &proc(), pc)?;
                self.cur().registers[dest as usize] = v;
                self.advance();
                self.tick(true);
            }
            MInst::StoreField { obj, index, src } => {
                let v = self.cur().registers[src as usize];
                let slot = self.field_mut(obj, index, &proc(), pc)?;
                *slot = v;
                self.advance();
                self.tick(true);
            }
            MInst::ProfileInc { counter } => {
                self.bump_counter(counter, 1);
                self.advance();
                self.tick(false);
            }
            MInst::PathAdd { value } => {
                self.cur().path_register = self.cur().path_register.wrapping_add(value);
                self.advance();
                self.tick(false);
            }
            MInst::PathCommit { base, limit } => {
                let reg = self.cur().path_register;
                if reg < limit as u64 {
                    self.bump_counter(base + reg as u32, 1);
                }
                self.cur().path_register = 0;
                self.advance();
                self.tick(false);
            }
            MInst::Jump { target } => {
                let back = target <= pc;
                self.cur().pc = target;
                self.tick(true);
                if back {
                    return Ok(Step::Safepoint(SafepointKind::BackEdge));
                }
            }
            MInst::Branch { cond, then_target, else_target } => {
                let taken = if self.cur().registers[cond as usize].truthy() {
                    then_target
                } else {
                    else_target
                };
                let back = taken <= pc;
                self.cur().pc = taken;
                self.tick(true);
                if back {
                    return Ok(Step::Safepoint(SafepointKind::BackEdge));
                }
            }
            MInst::Call { dest, callee, args } => {
                let handle = self
                    .lookup_procedure(&callee)
                    .ok_or_else(|| VmError::UnknownProcedure(callee.clone()))?;
                return self.do_call(handle, dest, &args);
            }
            MInst::CallIndirect { dest, target, args } => {
                let handle = match self.cur().registers[target as usize] {
                    Value::Proc(h) => h,
                    _ => return Err(VmError::NotAProcedure { proc: proc(), pc }),
                };
                return self.do_call(handle, dest, &args);
            }
            MInst::Ret { src } => {
                let v = self.cur().registers[src as usize];
                self.advance();
                self.tick(true);
                return Ok(self.pop_frame(v));
            }
        }
        Ok(Step::Ran)
    }

    fn do_call(&mut self, handle: ProcedureHandle, dest: Reg, args: &[Reg]) -> Result<Step, VmError> {
        let values: Vec<Value> =
            args.iter().map(|&r| self.cur().registers[r as usize]).collect();
        self.advance();
        self.tick(true);
        self.push_frame(handle, values, Some(dest))?;
        Ok(Step::Safepoint(SafepointKind::Call))
    }

    fn cur(&mut self) -> &mut ActivationFrame {
        self.frames.last_mut().expect("frame")
    }

    fn advance(&mut self) {
        self.cur().pc += 1;
    }

    fn int_at(&mut self, r: Reg, proc: &str, pc: usize) -> Result<i64, VmError> {
        match self.cur().registers[r as usize] {
            Value::Int(v) => Ok(v),
            // Arithmetic on references is a type confusion; surface as a trap.
            _ => Err(VmError::NotAProcedure { proc: proc.to_string(), pc }),
        }
    }

    fn field(&mut self, obj: Reg, index: u32, proc: &str, pc: usize) -> Result<Value, VmError> {
        let obj_ref = match self.cur().registers[obj as usize] {
            Value::Obj(o) => o,
            _ => return Err(VmError::NotAProcedure { proc: proc.to_string(), pc }),
        };
        self.store
            .objects
            .get(obj_ref.0)
            .and_then(|o| o.get(index as usize))
            .copied()
            .ok_or(VmError::FieldOutOfRange { proc: proc.to_string(), pc, index })
    }

    fn field_mut(
        &mut self,
        obj: Reg,
        index: u32,
        proc: &str,
        pc: usize,
    ) -> Result<&mut Value, VmError> {
        let obj_ref = match self.frames.last().unwrap().registers[obj as usize] {
            Value::Obj(o) => o,
            _ => return Err(VmError::NotAProcedure { proc: proc.to_string(), pc }),
        };
        self.store
            .objects
            .get_mut(obj_ref.0)
            .and_then(|o| o.get_mut(index as usize))
            .ok_or(VmError::FieldOutOfRange { proc: proc.to_string(), pc, index })
    }

    fn bump_counter(&mut self, cid: u32, by: u64) {
        let idx = cid as usize;
        if self.counters.len() <= idx {
            self.counters.resize(idx + 1, 0);
        }
        self.counters[idx] += by;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRegion {
    Globals,
    Store,
    Frames,
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

    #[test]
    fn constant_return() {
        let mut vm =
            vm_with("module m\nproc main nparams 0 entry\nblock b0\n  v0 = const 42\n  ret v0\n");
        assert_eq!(vm.invoke("main", vec![]).unwrap(), Value::Int(42));
    }

    #[test]
    fn call_indirect_through_global() {
        let mut vm = vm_with(
            "module m\nglobal g = &f\n\
             proc f nparams 1\nblock b0\n  ret p0\n\
             proc main nparams 1 entry\nblock b0\n  vf = load_global g\n  r = call_indirect vf (p0)\n  ret r\n",
        );
        assert_eq!(vm.invoke("main", vec![Value::Int(9)]).unwrap(), Value::Int(9));
    }

    #[test]
    fn div_by_zero_traps_with_location() {
        let mut vm = vm_with(
            "module m\nproc main nparams 0 entry\nblock b0\n  a = const 1\n  b = const 0\n  c = div a b\n  ret c\n",
        );
        match vm.invoke("main", vec![]) {
            Err(VmError::DivByZero { proc, pc }) => {
                assert_eq!(proc, "main");
                assert_eq!(pc, 2);
            }
            other => panic!("expected div-by-zero trap, got {other:?}"),
        }
    }

    #[test]
    fn loop_emits_back_edge_safepoints() {
        let mut vm = vm_with(
            "module m\nproc main nparams 0 entry\n\
             block b0\n  i = const 0\n  n = const 5\n  br loop\n\
             block loop\n  one = const 1\n  i = add i one\n  c = cmp_lt i n\n  br_if c loop exit\n\
             block exit\n  ret i\n",
        );
        vm.start("main", vec![]).unwrap();
        let mut back_edges = 0;
        loop {
            let report = vm.run_until_safepoint().unwrap();
            if report.kind == SafepointKind::BackEdge {
                back_edges += 1;
            }
            if let Some(v) = report.completed {
                assert_eq!(v, Value::Int(5));
                break;
            }
        }
        assert!(back_edges >= 4, "saw {back_edges} back edges");
    }

    #[test]
    fn nested_call_safepoints() {
        let mut vm = vm_with(
            "module m\n\
             proc g nparams 1\nblock b0\n  one = const 1\n  r = add p0 one\n  ret r\n\
             proc f nparams 1\nblock b0\n  r = call g (p0)\n  ret r\n\
             proc main nparams 0 entry\nblock b0\n  a = const 1\n  r = call f (a)\n  ret r\n",
        );
        vm.start("main", vec![]).unwrap();
        let mut kinds = Vec::new();
        loop {
            let report = vm.run_until_safepoint().unwrap();
            kinds.push(report.kind.clone());
            if report.completed.is_some() {
                break;
            }
        }
        let calls = kinds.iter().filter(|k| **k == SafepointKind::Call).count();
        let rets = kinds.iter().filter(|k| **k == SafepointKind::Return).count();
        assert_eq!(calls, 2);
        assert_eq!(rets, 3); // g, f, and main's completion
    }

    #[test]
    fn self_cost_excludes_instrumentation() {
        let mut vm = vm_with(
            "module m\nproc main nparams 0 entry\n\
             block b0\n  profile_inc 0\n  profile_inc 1\n  v0 = const 1\n  v1 = const 2\n  v2 = add v0 v1\n  ret v2\n",
        );
        for _ in 0..3 {
            vm.invoke("main", vec![]).unwrap();
        }
        let stats = vm.snapshot_stats("main").unwrap();
        assert_eq!(stats.invocations, 3);
        assert_eq!(stats.self_cost, 12); // 4 counted instructions per call
        assert_eq!(vm.counter(0), 3);
        assert_eq!(vm.counter(1), 3);
    }

    #[test]
    fn inclusive_cost_rolls_up() {
        let mut vm = vm_with(
            "module m\n\
             proc g nparams 0\nblock b0\n  a = const 1\n  b = const 2\n  c = add a b\n  ret c\n\
             proc f nparams 0\nblock b0\n  r = call g ()\n  ret r\n\
             proc main nparams 0 entry\nblock b0\n  r = call f ()\n  ret r\n",
        );
        vm.invoke("main", vec![]).unwrap();
        let f = vm.snapshot_stats("f").unwrap();
        let g = vm.snapshot_stats("g").unwrap();
        assert_eq!(g.self_cost, 4);
        assert_eq!(f.self_cost, 2); // call + ret
        assert_eq!(f.inclusive_cost, f.self_cost + g.self_cost);
    }

    #[test]
    fn sampling_period_counts() {
        let mut vm = vm_with(
            "module m\nproc main nparams 1 entry\n\
             block b0\n  i = const 0\n  br loop\n\
             block loop\n  one = const 1\n  i = add i one\n  c = cmp_lt i p0\n  br_if c loop exit\n\
             block exit\n  ret i\n",
        );
        vm.set_sample_period(Some(100));
        vm.invoke("main", vec![Value::Int(1000)]).unwrap();
        let clock = vm.virtual_clock;
        let samples = vm.take_samples();
        assert_eq!(samples.len() as u64, clock / 100);
    }

    #[test]
    fn sample_period_longer_than_run_gives_no_samples() {
        let mut vm =
            vm_with("module m\nproc main nparams 0 entry\nblock b0\n  v0 = const 1\n  ret v0\n");
        vm.set_sample_period(Some(1_000_000));
        vm.invoke("main", vec![]).unwrap();
        assert!(vm.take_samples().is_empty());
    }

    #[test]
    fn determinism_identical_runs() {
        let text = "module m\nproc main nparams 1 entry\n\
             block b0\n  i = const 0\n  br loop\n\
             block loop\n  one = const 1\n  i = add i one\n  c = cmp_lt i p0\n  br_if c loop exit\n\
             block exit\n  ret i\n";
        let run = || {
            let mut vm = vm_with(text);
            vm.set_sample_period(Some(7));
            let out = vm.invoke("main", vec![Value::Int(50)]).unwrap();
            (out, vm.virtual_clock, vm.take_samples(), vm.trace_lines().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn arity_mismatch_trap() {
        let mut vm = vm_with(
            "module m\nproc main nparams 2 entry\nblock b0\n  ret p0\n",
        );
        assert!(matches!(
            vm.invoke("main", vec![Value::Int(1)]),
            Err(VmError::ArityMismatch { .. })
        ));
    }
}
