//! Code-generating loader: translates transport form into executable form as
//! fast as possible (no optimization), and loads extension modules at
//! runtime.
//!
//! The executable form is a flat register-machine image. Phi nodes are
//! eliminated with parallel copies on predecessor edges (splitting critical
//! edges with synthetic copy blocks), block labels resolve to instruction
//! indices, and every SSA name gets its own virtual register.

use std::collections::HashMap;

use thiserror::Error;

use crate::ir::{build_ssa, BuildError, ProcedureIR};
use crate::transport::{
    BinOp, GlobalInit, Inst, Label, Name, TransportModule, TransportProcedure,
};
use crate::vm::{ProcedureHandle, Value, Vm, VmError};

pub type Reg = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Loader,
    Optimizer,
}

/// Executable form of one procedure. Stands in for native code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecImage {
    pub proc_name: String,
    pub param_count: u32,
    pub instructions: Vec<MInst>,
    pub register_count: u32,
    pub origin: Origin,
    pub schedule_version: u64,
    /// Block start offsets, ascending, for attributing samples to labels.
    pub labels: Vec<(usize, Label)>,
}

impl ExecImage {
    pub fn label_at(&self, pc: usize) -> &str {
        match self.labels.binary_search_by_key(&pc, |(start, _)| *start) {
            Ok(i) => &self.labels[i].1,
            Err(0) => "?",
            Err(i) => &self.labels[i - 1].1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MInst {
    Const { dest: Reg, value: i64 },
    Bin { dest: Reg, op: BinOp, lhs: Reg, rhs: Reg },
    Copy { dest: Reg, src: Reg },
    Call { dest: Reg, callee: String, args: Vec<Reg> },
    CallIndirect { dest: Reg, target: Reg, args: Vec<Reg> },
    ProcRef { dest: Reg, proc: String },
    LoadGlobal { dest: Reg, global: String },
    StoreGlobal { global: String, src: Reg },
    NewObj { dest: Reg, fields: u32 },
    LoadField { dest: Reg, obj: Reg, index: u32 },
    StoreField { obj: Reg, index: u32, src: Reg },
    ProfileInc { counter: u32 },
    PathAdd { value: u64 },
    PathCommit { base: u32, limit: u32 },
    Jump { target: usize },
    Branch { cond: Reg, then_target: usize, else_target: usize },
    Ret { src: Reg },
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("module `{0}` already loaded")]
    ModuleCollision(String),
    #[error("unresolved reference `{0}`")]
    Unresolved(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("executable module must mark exactly one entry procedure")]
    NoEntry,
    #[error(transparent)]
    Vm(#[from] VmError),
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

/// Lower SSA to the flat executable form. Single pass per block; no fixpoint
/// analyses (the loader must stay fast — quality belongs to the optimizer).
pub fn lower_image(ir: &ProcedureIR) -> ExecImage {
    Lowering::new(ir).run()
}

struct Lowering<'a> {
    ir: &'a ProcedureIR,
    regs: HashMap<&'a Name, Reg>,
    next_reg: Reg,
    /// Parallel copies per (pred block index, succ block index).
    edge_copies: HashMap<(usize, usize), Vec<(Reg, Reg)>>,
    visits: usize,
}

impl<'a> Lowering<'a> {
    fn new(ir: &'a ProcedureIR) -> Self {
        Lowering {
            ir,
            regs: HashMap::new(),
            next_reg: ir.param_count,
            edge_copies: HashMap::new(),
            visits: 0,
        }
    }

    fn reg(&mut self, name: &'a Name) -> Reg {
        if let Some(&r) = self.regs.get(name) {
            return r;
        }
        // Parameters occupy registers 0..param_count.
        let r = if let Some(idx) = param_index(name, self.ir.param_count) {
            idx
        } else {
            let r = self.next_reg;
            self.next_reg += 1;
            r
        };
        self.regs.insert(name, r);
        r
    }

    fn run(mut self) -> ExecImage {
        let cfg = self.ir.cfg();
        let blocks = &self.ir.blocks;
        let total_insts: usize =
            blocks.iter().map(|b| b.phis.len() + b.insts.len() + 1).sum();

        // Collect parallel copies for every edge into a block with phis.
        for (bi, block) in blocks.iter().enumerate() {
            for phi in &block.phis {
                let dest = self.reg(&phi.dest);
                for (lbl, src) in &phi.incomings {
                    let pred = cfg.index[lbl];
                    let src = self.reg(src);
                    self.edge_copies.entry((pred, bi)).or_default().push((dest, src));
                }
                self.visits += 1;
            }
        }

        // Emit blocks in order, then synthetic copy blocks for conditional
        // edges that carry copies. Targets are patched afterwards.
        #[derive(Clone, Copy)]
        enum Target {
            Block(usize),
            Edge(usize, usize),
        }
        let mut code: Vec<MInst> = Vec::new();
        let mut labels: Vec<(usize, Label)> = Vec::new();
        let mut block_start = vec![0usize; blocks.len()];
        let mut fixups: Vec<(usize, Target)> = Vec::new();
        let mut deferred_edges: Vec<(usize, usize)> = Vec::new();

        for (bi, block) in blocks.iter().enumerate() {
            block_start[bi] = code.len();
            labels.push((code.len(), block.label.clone()));
            for inst in &block.insts {
                let m = self.lower_inst(inst);
                code.push(m);
                self.visits += 1;
            }
            self.visits += 1;
            match &block.term {
                crate::transport::Terminator::Ret(v) => {
                    let src = self.reg_existing(v);
                    code.push(MInst::Ret { src });
                }
                crate::transport::Terminator::Br(l) => {
                    let succ = cfg.index[l];
                    if let Some(copies) = self.edge_copies.get(&(bi, succ)) {
                        let seq = sequentialize(copies.clone(), &mut self.next_reg);
                        code.extend(seq);
                    }
                    fixups.push((code.len(), Target::Block(succ)));
                    code.push(MInst::Jump { target: usize::MAX });
                }
                crate::transport::Terminator::BrIf { cond, then_label, else_label } => {
                    let cond = self.reg_existing(cond);
                    let t = cfg.index[then_label];
                    let e = cfg.index[else_label];
                    let then_tgt = if self.edge_copies.contains_key(&(bi, t)) {
                        deferred_edges.push((bi, t));
                        Target::Edge(bi, t)
                    } else {
                        Target::Block(t)
                    };
                    let else_tgt = if self.edge_copies.contains_key(&(bi, e)) {
                        deferred_edges.push((bi, e));
                        Target::Edge(bi, e)
                    } else {
                        Target::Block(e)
                    };
                    fixups.push((code.len(), then_tgt));
                    fixups.push((code.len(), else_tgt));
                    code.push(MInst::Branch {
                        cond,
                        then_target: usize::MAX,
                        else_target: usize::MAX,
                    });
                }
            }
        }

        // Synthetic copy blocks for conditional edges.
        let mut edge_start: HashMap<(usize, usize), usize> = HashMap::new();
        deferred_edges.sort_unstable();
        deferred_edges.dedup();
        for (pred, succ) in deferred_edges {
            edge_start.insert((pred, succ), code.len());
            labels.push((code.len(), blocks[succ].label.clone()));
            let copies = self.edge_copies[&(pred, succ)].clone();
            code.extend(sequentialize(copies, &mut self.next_reg));
            fixups.push((code.len(), Target::Block(succ)));
            code.push(MInst::Jump { target: usize::MAX });
        }

        for (at, target) in fixups {
            let resolved = match target {
                Target::Block(b) => block_start[b],
                Target::Edge(p, s) => edge_start[&(p, s)],
            };
            match &mut code[at] {
                MInst::Jump { target } => *target = resolved,
                MInst::Branch { then_target, else_target, .. } => {
                    if *then_target == usize::MAX {
                        *then_target = resolved;
                    } else {
                        *else_target = resolved;
                    }
                }
                _ => unreachable!(),
            }
        }

        debug_assert!(self.visits <= 2 * total_insts.max(1), "loader is not single-pass");

        ExecImage {
            proc_name: self.ir.name.clone(),
            param_count: self.ir.param_count,
            instructions: code,
            register_count: self.next_reg.max(self.ir.param_count),
            origin: Origin::Loader,
            schedule_version: 0,
            labels,
        }
    }

    fn reg_existing(&mut self, name: &'a Name) -> Reg {
        self.reg(name)
    }

    fn lower_inst(&mut self, inst: &'a Inst) -> MInst {
        match inst {
            Inst::Const { dest, value } => MInst::Const { dest: self.reg(dest), value: *value },
            Inst::Bin { dest, op, lhs, rhs } => {
                let lhs = self.reg(lhs);
                let rhs = self.reg(rhs);
                MInst::Bin { dest: self.reg(dest), op: *op, lhs, rhs }
            }
            Inst::Call { dest, callee, args } => {
                let args = args.iter().map(|a| self.reg(a)).collect();
                MInst::Call { dest: self.reg(dest), callee: callee.clone(), args }
            }
            Inst::CallIndirect { dest, target, args } => {
                let target = self.reg(target);
                let args = args.iter().map(|a| self.reg(a)).collect();
                MInst::CallIndirect { dest: self.reg(dest), target, args }
            }
            Inst::ProcRef { dest, proc } => {
                MInst::ProcRef { dest: self.reg(dest), proc: proc.clone() }
            }
            Inst::LoadGlobal { dest, global } => {
                MInst::LoadGlobal { dest: self.reg(dest), global: global.clone() }
            }
            Inst::StoreGlobal { global, src } => {
                MInst::StoreGlobal { global: global.clone(), src: self.reg(src) }
            }
            Inst::NewObj { dest, fields } => {
                MInst::NewObj { dest: self.reg(dest), fields: *fields }
            }
            Inst::LoadField { dest, obj, index } => {
                let obj = self.reg(obj);
                MInst::LoadField { dest: self.reg(dest), obj, index: *index }
            }
            Inst::StoreField { obj, index, src } => MInst::StoreField {
                obj: self.reg(obj),
                index: *index,
                src: self.reg(src),
            },
            Inst::ProfileInc { counter } => MInst::ProfileInc { counter: *counter },
            Inst::PathAdd { value } => MInst::PathAdd { value: *value },
            Inst::PathCommit { base, limit } => {
                MInst::PathCommit { base: *base, limit: *limit }
            }
        }
    }
}

fn param_index(name: &str, param_count: u32) -> Option<Reg> {
    let rest = name.strip_prefix('p')?;
    let idx: u32 = rest.parse().ok()?;
    (idx < param_count).then_some(idx)
}

/// Order a parallel copy set into sequential copies, breaking cycles with a
/// temporary register (handles the lost-copy and swap patterns).
fn sequentialize(mut copies: Vec<(Reg, Reg)>, next_reg: &mut Reg) -> Vec<MInst> {
    let mut out = Vec::new();
    copies.retain(|(d, s)| d != s);
    while !copies.is_empty() {
        // A copy is safe if its destination is not a pending source.
        if let Some(pos) = copies
            .iter()
            .position(|&(d, _)| !copies.iter().any(|&(_, s)| s == d))
        {
            let (d, s) = copies.remove(pos);
            out.push(MInst::Copy { dest: d, src: s });
        } else {
            // Cycle: move one source aside.
            let temp = *next_reg;
            *next_reg += 1;
            let (_, s) = copies[0];
            out.push(MInst::Copy { dest: temp, src: s });
            for (_, src) in copies.iter_mut() {
                if *src == s {
                    *src = temp;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Module loading
// ---------------------------------------------------------------------------

/// Source procedures kept for the optimizer, which always rebuilds IR from
/// transport form.
#[derive(Debug, Default, Clone)]
pub struct ModuleStore {
    procedures: HashMap<String, TransportProcedure>,
}

impl ModuleStore {
    pub fn get(&self, name: &str) -> Option<&TransportProcedure> {
        self.procedures.get(name)
    }

    pub fn insert(&mut self, p: TransportProcedure) {
        self.procedures.insert(p.name.clone(), p);
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.procedures.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

/// Translate every procedure of a validated module directly into executable
/// form (no optimization phases), initialize globals, and register handles.
pub fn load_module(m: &TransportModule, vm: &mut Vm) -> Result<Vec<ProcedureHandle>, LoadError> {
    load_common(m, vm, false)
}

/// Load an extension module at runtime. The module may reference (and its
/// initialization may overwrite) globals and procedures of already-loaded
/// modules; writes to guarded globals surface as events so assumptions are
/// invalidated before the write becomes visible.
pub fn load_extension(
    m: &TransportModule,
    vm: &mut Vm,
) -> Result<Vec<ProcedureHandle>, LoadError> {
    load_common(m, vm, true)
}

fn load_common(
    m: &TransportModule,
    vm: &mut Vm,
    extension: bool,
) -> Result<Vec<ProcedureHandle>, LoadError> {
    if vm.module_loaded(&m.name) {
        return Err(LoadError::ModuleCollision(m.name.clone()));
    }
    let imports = m.imports();
    if !extension && !imports.is_empty() {
        let name = imports
            .procedures
            .first()
            .or(imports.globals.first())
            .cloned()
            .unwrap_or_default();
        return Err(LoadError::Unresolved(name));
    }
    for p in &imports.procedures {
        if !vm.has_procedure(p) {
            return Err(LoadError::Unresolved(p.clone()));
        }
    }
    for g in &imports.globals {
        if !vm.has_global(g) {
            return Err(LoadError::Unresolved(g.clone()));
        }
    }
    for proc in &m.procedures {
        if vm.has_procedure(&proc.name) {
            return Err(LoadError::ModuleCollision(proc.name.clone()));
        }
    }

    let mut handles = Vec::new();
    let mut lowered = Vec::new();
    for proc in &m.procedures {
        let ir = build_ssa(proc)?;
        lowered.push(lower_image(&ir));
    }
    vm.register_module(&m.name);
    for (proc, image) in m.procedures.iter().zip(lowered) {
        let handle = vm.install_procedure(image);
        vm.sources_mut().insert(proc.clone());
        handles.push(handle);
    }
    // Globals are initialized after procedure registration so that
    // procedure-valued globals resolve to live handles.
    for (name, init) in &m.globals {
        let value = match init {
            GlobalInit::Int(v) => Value::Int(*v),
            GlobalInit::Proc(p) => {
                let h = vm.lookup_procedure(p).ok_or_else(|| LoadError::Unresolved(p.clone()))?;
                Value::Proc(h)
            }
        };
        vm.define_global(name.clone(), value);
    }
    if let Some(entry) = &m.entry {
        vm.set_entry(&m.name, entry);
    }
    Ok(handles)
}
