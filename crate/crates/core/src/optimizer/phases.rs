//! Shipped optimization phases: constant folding, dead-code elimination,
//! local common-subexpression elimination, inlining, devirtualization of
//! indirect calls, and instrumentation insertion for the path profiler.
//!
//! All phases are IR-to-IR transforms over SSA form. Division is treated
//! carefully throughout: a `div` can trap, so it is neither folded against a
//! zero divisor nor deleted as dead code.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::ir::ProcedureIR;
use crate::profiling::{ArmedPlan, SharedRegistry};
use crate::transport::{BinOp, Inst, Label, Name, Terminator};
use crate::vm::Value;

use super::{Anchor, AssumptionRequest, OptimizationPhase, PhaseContext, PhaseFailure, PhaseResult};

fn ok(applied: bool) -> Result<PhaseResult, PhaseFailure> {
    Ok(PhaseResult { applied, assumptions: Vec::new() })
}

fn terminator_uses(t: &Terminator) -> Vec<&Name> {
    match t {
        Terminator::BrIf { cond, .. } => vec![cond],
        Terminator::Ret(v) => vec![v],
        Terminator::Br(_) => vec![],
    }
}

/// Rewrite every use of the given names across the whole procedure.
fn rewrite_uses(ir: &mut ProcedureIR, renames: &HashMap<Name, Name>) {
    if renames.is_empty() {
        return;
    }
    let resolve = |name: &Name| -> Option<Name> {
        let mut cur = name;
        let mut hops = 0;
        while let Some(next) = renames.get(cur) {
            cur = next;
            hops += 1;
            if hops > renames.len() {
                break;
            }
        }
        (cur != name).then(|| cur.clone())
    };
    for block in &mut ir.blocks {
        for phi in &mut block.phis {
            for (_, v) in &mut phi.incomings {
                if let Some(n) = resolve(v) {
                    *v = n;
                }
            }
        }
        for inst in &mut block.insts {
            for u in inst.uses_mut() {
                if let Some(n) = resolve(u) {
                    *u = n;
                }
            }
        }
        match &mut block.term {
            Terminator::BrIf { cond, .. } => {
                if let Some(n) = resolve(cond) {
                    *cond = n;
                }
            }
            Terminator::Ret(v) => {
                if let Some(n) = resolve(v) {
                    *v = n;
                }
            }
            Terminator::Br(_) => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Constant folding
// ---------------------------------------------------------------------------

pub struct ConstFold;

impl OptimizationPhase for ConstFold {
    fn name(&self) -> &str {
        "constfold"
    }
    fn anchors(&self) -> Vec<Anchor> {
        Vec::new()
    }
    fn prior_speedup(&self) -> f64 {
        0.05
    }
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        _ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        let mut applied = false;
        loop {
            let consts: HashMap<Name, i64> = ir
                .blocks
                .iter()
                .flat_map(|b| b.insts.iter())
                .filter_map(|i| match i {
                    Inst::Const { dest, value } => Some((dest.clone(), *value)),
                    _ => None,
                })
                .collect();
            let mut changed = false;
            for block in &mut ir.blocks {
                for inst in &mut block.insts {
                    if let Inst::Bin { dest, op, lhs, rhs } = inst {
                        let (Some(&a), Some(&b)) = (consts.get(lhs), consts.get(rhs)) else {
                            continue;
                        };
                        // Never fold a trapping division away.
                        if *op == BinOp::Div && b == 0 {
                            continue;
                        }
                        let value = op.eval(a, b).expect("checked divisor");
                        *inst = Inst::Const { dest: dest.clone(), value };
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
            applied = true;
        }
        ok(applied)
    }
}

// ---------------------------------------------------------------------------
// Dead-code elimination
// ---------------------------------------------------------------------------

pub struct Dce;

fn removable(inst: &Inst) -> bool {
    matches!(
        inst,
        Inst::Const { .. }
            | Inst::Bin { op: BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::CmpLt | BinOp::CmpEq, .. }
            | Inst::ProcRef { .. }
            | Inst::LoadGlobal { .. }
    )
}

impl OptimizationPhase for Dce {
    fn name(&self) -> &str {
        "dce"
    }
    fn anchors(&self) -> Vec<Anchor> {
        vec![Anchor::Last]
    }
    fn prior_speedup(&self) -> f64 {
        0.03
    }
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        _ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        let mut applied = false;
        loop {
            let mut used: HashSet<Name> = HashSet::new();
            for block in &ir.blocks {
                for phi in &block.phis {
                    used.extend(phi.incomings.iter().map(|(_, v)| v.clone()));
                }
                for inst in &block.insts {
                    used.extend(inst.uses().into_iter().cloned());
                }
                used.extend(terminator_uses(&block.term).into_iter().cloned());
            }
            let mut changed = false;
            for block in &mut ir.blocks {
                let before = block.insts.len() + block.phis.len();
                block
                    .insts
                    .retain(|i| !(removable(i) && i.dest().is_some_and(|d| !used.contains(d))));
                block.phis.retain(|p| used.contains(&p.dest));
                changed |= block.insts.len() + block.phis.len() != before;
            }
            if !changed {
                break;
            }
            applied = true;
        }
        ok(applied)
    }
}

// ---------------------------------------------------------------------------
// Local common-subexpression elimination
// ---------------------------------------------------------------------------

pub struct Cse;

impl OptimizationPhase for Cse {
    fn name(&self) -> &str {
        "cse"
    }
    fn anchors(&self) -> Vec<Anchor> {
        Vec::new()
    }
    fn prior_speedup(&self) -> f64 {
        0.20
    }
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        _ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        let mut renames: HashMap<Name, Name> = HashMap::new();
        for block in &mut ir.blocks {
            // Value numbering local to the block; an earlier definition in
            // the same block dominates every later use, so replacing the
            // duplicate's uses is sound in SSA.
            let mut seen: HashMap<String, Name> = HashMap::new();
            block.insts.retain(|inst| {
                let key = match inst {
                    Inst::Const { value, .. } => format!("const {value}"),
                    Inst::Bin { op, lhs, rhs, .. } => {
                        // Commutative ops hash operand-order independent.
                        let (a, b) = match op {
                            BinOp::Add | BinOp::Mul | BinOp::CmpEq if rhs < lhs => (rhs, lhs),
                            _ => (lhs, rhs),
                        };
                        format!("{} {a} {b}", op.mnemonic())
                    }
                    _ => return true,
                };
                let dest = inst.dest().unwrap().clone();
                match seen.get(&key) {
                    Some(existing) => {
                        renames.insert(dest, existing.clone());
                        false
                    }
                    None => {
                        seen.insert(key, dest);
                        true
                    }
                }
            });
        }
        let applied = !renames.is_empty();
        rewrite_uses(ir, &renames);
        ok(applied)
    }
}

// ---------------------------------------------------------------------------
// Inlining
// ---------------------------------------------------------------------------

/// Callee images at most this many instructions are inline candidates.
pub const INLINE_BUDGET: usize = 24;
/// At most this many call sites are inlined per pass through a procedure.
pub const INLINE_SITE_LIMIT: usize = 4;

pub struct Inline {
    registry: SharedRegistry,
    counter: u64,
}

impl Inline {
    pub fn new(registry: SharedRegistry) -> Self {
        Inline { registry, counter: 0 }
    }

    /// Procedures in the top decile by invocation count (at least one).
    fn hot_set(ctx: &PhaseContext) -> BTreeSet<String> {
        let mut counts: Vec<(String, u64)> = ctx
            .vm
            .procedure_names()
            .into_iter()
            .map(|p| {
                let inv = ctx.vm.snapshot_stats(&p).map(|s| s.invocations).unwrap_or(0);
                (p, inv)
            })
            .collect();
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = (counts.len().div_ceil(10)).max(1);
        counts.into_iter().take(keep).map(|(p, _)| p).collect()
    }

    fn apply(
        &mut self,
        ir: &mut ProcedureIR,
        ctx: &PhaseContext,
        require_hot: bool,
    ) -> Result<PhaseResult, PhaseFailure> {
        // An instrumented caller's path numbering is tied to its CFG shape;
        // splicing callee blocks in would corrupt it, so decline.
        if self.registry.borrow().interested(&ir.name) {
            return ok(false);
        }
        let hot = if require_hot { Some(Self::hot_set(ctx)) } else { None };
        let mut applied = false;
        for _ in 0..INLINE_SITE_LIMIT {
            let Some((bi, ii, callee)) = find_site(ir, ctx, hot.as_ref()) else { break };
            self.counter += 1;
            splice(ir, ctx, bi, ii, &callee, self.counter)?;
            applied = true;
        }
        ok(applied)
    }
}

fn find_site(
    ir: &ProcedureIR,
    ctx: &PhaseContext,
    hot: Option<&BTreeSet<String>>,
) -> Option<(usize, usize, String)> {
    for (bi, block) in ir.blocks.iter().enumerate() {
        for (ii, inst) in block.insts.iter().enumerate() {
            let Inst::Call { callee, .. } = inst else { continue };
            if *callee == ir.name {
                continue; // never inline recursion
            }
            if let Some(hot) = hot {
                if !hot.contains(callee) {
                    continue;
                }
            }
            let Some(image) = ctx.vm.image_of(callee) else { continue };
            if image.instructions.len() > INLINE_BUDGET {
                continue;
            }
            if ctx.vm.sources().get(callee).is_none() {
                continue;
            }
            return Some((bi, ii, callee.clone()));
        }
    }
    None
}

/// Replace the call at `blocks[bi].insts[ii]` with the callee's body.
fn splice(
    ir: &mut ProcedureIR,
    ctx: &PhaseContext,
    bi: usize,
    ii: usize,
    callee: &str,
    n: u64,
) -> Result<(), PhaseFailure> {
    let source = ctx.vm.sources().get(callee).unwrap().clone();
    let callee_ir = crate::ir::build_ssa(&source).map_err(|e| PhaseFailure {
        phase: "inline".into(),
        reason: format!("callee SSA failed: {e:?}"),
    })?;

    let Inst::Call { dest, args, .. } = ir.blocks[bi].insts[ii].clone() else {
        unreachable!("checked by find_site")
    };

    let prefix = |s: &str| format!("inl{n}.{s}");
    // Parameters map to the caller's argument names; everything else gets a
    // unique prefix.
    let mut value_map: HashMap<Name, Name> = HashMap::new();
    for (i, arg) in args.iter().enumerate() {
        value_map.insert(crate::transport::TransportProcedure::param_name(i as u32), arg.clone());
    }
    let map_value = |value_map: &HashMap<Name, Name>, v: &Name| -> Name {
        value_map.get(v).cloned().unwrap_or_else(|| prefix(v))
    };

    let cont_label: Label = prefix("cont");
    let entry_label: Label = prefix(&callee_ir.blocks[0].label);

    // Renamed callee blocks; rets become branches to the continuation.
    let mut new_blocks = Vec::new();
    let mut ret_incomings: Vec<(Label, Name)> = Vec::new();
    for block in &callee_ir.blocks {
        let label = prefix(&block.label);
        let phis = block
            .phis
            .iter()
            .map(|p| crate::transport::Phi {
                dest: prefix(&p.dest),
                incomings: p
                    .incomings
                    .iter()
                    .map(|(l, v)| (prefix(l), map_value(&value_map, v)))
                    .collect(),
            })
            .collect();
        let insts = block
            .insts
            .iter()
            .filter(|i| {
                !matches!(i, Inst::ProfileInc { .. } | Inst::PathAdd { .. } | Inst::PathCommit { .. })
            })
            .map(|i| {
                let mut i = i.clone();
                if let Some(d) = i.dest() {
                    let d = prefix(d);
                    match &mut i {
                        Inst::Const { dest, .. }
                        | Inst::Bin { dest, .. }
                        | Inst::Call { dest, .. }
                        | Inst::CallIndirect { dest, .. }
                        | Inst::ProcRef { dest, .. }
                        | Inst::LoadGlobal { dest, .. }
                        | Inst::NewObj { dest, .. }
                        | Inst::LoadField { dest, .. } => *dest = d,
                        _ => {}
                    }
                }
                for u in i.uses_mut() {
                    *u = map_value(&value_map, u);
                }
                i
            })
            .collect();
        let term = match &block.term {
            Terminator::Br(l) => Terminator::Br(prefix(l)),
            Terminator::BrIf { cond, then_label, else_label } => Terminator::BrIf {
                cond: map_value(&value_map, cond),
                then_label: prefix(then_label),
                else_label: prefix(else_label),
            },
            Terminator::Ret(v) => {
                ret_incomings.push((label.clone(), map_value(&value_map, v)));
                Terminator::Br(cont_label.clone())
            }
        };
        new_blocks.push(crate::transport::Block { label, phis, insts, term });
    }

    // Split the caller block: head keeps the prefix and branches into the
    // callee; the continuation owns the tail and the original terminator.
    let caller = &mut ir.blocks[bi];
    let tail: Vec<Inst> = caller.insts.split_off(ii + 1);
    caller.insts.pop(); // the call itself
    let original_term = std::mem::replace(&mut caller.term, Terminator::Br(entry_label));
    let caller_label = caller.label.clone();

    let cont = crate::transport::Block {
        label: cont_label.clone(),
        phis: vec![crate::transport::Phi { dest: dest.clone(), incomings: ret_incomings }],
        insts: tail,
        term: original_term,
    };

    // Phis in the original successors referred to the caller block; the
    // continuation is now the predecessor on those edges.
    let succ_labels: Vec<Label> =
        cont.term.successors().into_iter().cloned().collect();
    for block in &mut ir.blocks {
        if succ_labels.contains(&block.label) {
            for phi in &mut block.phis {
                for (l, _) in &mut phi.incomings {
                    if *l == caller_label {
                        *l = cont_label.clone();
                    }
                }
            }
        }
    }

    let insert_at = bi + 1;
    for (offset, b) in new_blocks.into_iter().enumerate() {
        ir.blocks.insert(insert_at + offset, b);
    }
    let cont_at = insert_at + callee_ir.blocks.len();
    ir.blocks.insert(cont_at, cont);
    Ok(())
}

impl OptimizationPhase for Inline {
    fn name(&self) -> &str {
        "inline"
    }
    fn anchors(&self) -> Vec<Anchor> {
        Vec::new()
    }
    fn prior_speedup(&self) -> f64 {
        0.10
    }
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        self.apply(ir, ctx, true)
    }
    fn recompile(
        &mut self,
        ir: &mut ProcedureIR,
        ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        // Pessimistic: no fresh profitability judgment, so no hotness gate;
        // the size budget alone decides.
        self.apply(ir, ctx, false)
    }
}

// ---------------------------------------------------------------------------
// Devirtualization
// ---------------------------------------------------------------------------

pub struct Devirtualize;

impl OptimizationPhase for Devirtualize {
    fn name(&self) -> &str {
        "devirtualize"
    }
    fn anchors(&self) -> Vec<Anchor> {
        Vec::new()
    }
    fn prior_speedup(&self) -> f64 {
        0.08
    }
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        let mut assumptions = Vec::new();
        let mut applied = false;
        for block in &mut ir.blocks {
            // Names defined by a load of a procedure-valued global earlier
            // in this block, invalidated by anything that could write
            // globals (stores and calls).
            let mut loaded: HashMap<Name, String> = HashMap::new();
            for inst in &mut block.insts {
                match inst {
                    Inst::LoadGlobal { dest, global } => {
                        loaded.insert(dest.clone(), global.clone());
                    }
                    Inst::StoreGlobal { .. } => loaded.clear(),
                    Inst::CallIndirect { dest, target, args } => {
                        let bind = loaded.get(target).and_then(|g| {
                            match ctx.vm.global(g) {
                                Some(Value::Proc(h)) => {
                                    ctx.vm.image(*h).map(|img| (g.clone(), *h, img.proc_name.clone()))
                                }
                                _ => None,
                            }
                        });
                        if let Some((global, handle, callee)) = bind {
                            *inst = Inst::Call {
                                dest: dest.clone(),
                                callee,
                                args: args.clone(),
                            };
                            assumptions.push(AssumptionRequest { global, expected: handle });
                            applied = true;
                        } else {
                            loaded.clear(); // the call may store globals
                        }
                    }
                    Inst::Call { .. } => loaded.clear(),
                    _ => {}
                }
            }
        }
        Ok(PhaseResult { applied, assumptions })
    }
}

// ---------------------------------------------------------------------------
// Instrumentation insertion
// ---------------------------------------------------------------------------

pub struct Instrument {
    registry: SharedRegistry,
}

impl Instrument {
    pub fn new(registry: SharedRegistry) -> Self {
        Instrument { registry }
    }
}

impl OptimizationPhase for Instrument {
    fn name(&self) -> &str {
        "instrument"
    }
    fn anchors(&self) -> Vec<Anchor> {
        vec![Anchor::First]
    }
    fn prior_speedup(&self) -> f64 {
        0.0
    }
    fn attributable(&self) -> bool {
        false
    }
    fn recompiles_without_history(&self) -> bool {
        true
    }
    fn optimize(
        &mut self,
        ir: &mut ProcedureIR,
        _ctx: &PhaseContext,
    ) -> Result<PhaseResult, PhaseFailure> {
        let armed: Option<ArmedPlan> = {
            let mut reg = self.registry.borrow_mut();
            if !reg.interested(&ir.name) {
                None
            } else {
                match reg.arm(ir) {
                    Ok(armed) => Some(armed.clone()),
                    Err(e) => {
                        // Too many paths: decline instrumentation entirely.
                        log::warn!("instrument {}: {e}", ir.name);
                        None
                    }
                }
            }
        };
        let Some(armed) = armed else { return ok(false) };
        insert_instrumentation(ir, &armed);
        ok(true)
    }
}

fn insert_instrumentation(ir: &mut ProcedureIR, armed: &ArmedPlan) {
    for (from, to, w) in &armed.plan.increments {
        place_on_edge(ir, from, to, vec![Inst::PathAdd { value: *w }]);
    }
    for (i, (from, to)) in armed.plan.back_edges.iter().enumerate() {
        let cid = armed.back_edge_counters[i];
        // Count the edge, then discard the partial path (limit 0 commits
        // nothing and resets the register).
        place_on_edge(
            ir,
            from,
            to,
            vec![Inst::ProfileInc { counter: cid }, Inst::PathCommit { base: 0, limit: 0 }],
        );
    }
    for label in &armed.plan.exit_blocks {
        if let Some(block) = ir.blocks.iter_mut().find(|b| b.label == *label) {
            block.insts.push(Inst::PathCommit {
                base: armed.path_base,
                limit: armed.plan.num_paths,
            });
        }
    }
}

/// Insert instructions on the CFG edge `from -> to`, splitting the edge with
/// a fresh block when neither endpoint can host them.
fn place_on_edge(ir: &mut ProcedureIR, from: &str, to: &str, insts: Vec<Inst>) {
    let preds_of_to = ir
        .blocks
        .iter()
        .filter(|b| b.term.successors().iter().any(|l| *l == to))
        .count();
    let to_idx = ir.blocks.iter().position(|b| b.label == to);
    let from_idx = ir.blocks.iter().position(|b| b.label == from);
    let (Some(to_idx), Some(from_idx)) = (to_idx, from_idx) else { return };

    if preds_of_to == 1 {
        let block = &mut ir.blocks[to_idx];
        for (i, inst) in insts.into_iter().enumerate() {
            block.insts.insert(i, inst);
        }
        return;
    }
    if matches!(ir.blocks[from_idx].term, Terminator::Br(_)) {
        ir.blocks[from_idx].insts.extend(insts);
        return;
    }

    // Critical edge: split it.
    let new_label = format!("ins.{from}.{to}");
    match &mut ir.blocks[from_idx].term {
        Terminator::BrIf { then_label, else_label, .. } => {
            if then_label == to {
                *then_label = new_label.clone();
            }
            if else_label == to {
                *else_label = new_label.clone();
            }
        }
        Terminator::Br(l) => {
            if l == to {
                *l = new_label.clone();
            }
        }
        Terminator::Ret(_) => return,
    }
    for phi in &mut ir.blocks[to_idx].phis {
        for (l, _) in &mut phi.incomings {
            if l == from {
                *l = new_label.clone();
            }
        }
    }
    ir.blocks.push(crate::transport::Block {
        label: new_label,
        phis: Vec::new(),
        insts,
        term: Terminator::Br(to.to_string()),
    });
}

/// The standard bundle in schedule order, sharing one instrumentation
/// registry.
pub fn standard_phases(registry: &SharedRegistry) -> Vec<Box<dyn OptimizationPhase>> {
    vec![
        Box::new(Instrument::new(registry.clone())),
        Box::new(ConstFold),
        Box::new(Cse),
        Box::new(Inline::new(registry.clone())),
        Box::new(Devirtualize),
        Box::new(Dce),
    ]
}

/// Build the named subset of the standard bundle; unknown names are errors.
pub fn phases_by_name(
    names: &[&str],
    registry: &SharedRegistry,
) -> Result<Vec<Box<dyn OptimizationPhase>>, String> {
    let mut out: Vec<Box<dyn OptimizationPhase>> = Vec::new();
    let known: BTreeMap<&str, ()> = [
        ("instrument", ()),
        ("constfold", ()),
        ("cse", ()),
        ("inline", ()),
        ("devirtualize", ()),
        ("dce", ()),
    ]
    .into_iter()
    .collect();
    for &name in names {
        if !known.contains_key(name) {
            return Err(format!("unknown phase `{name}`"));
        }
    }
    for phase in standard_phases(registry) {
        if names.contains(&phase.name()) {
            out.push(phase);
        }
    }
    Ok(out)
}
