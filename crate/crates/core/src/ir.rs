//! SSA intermediate form: the representation optimization phases operate on.
//!
//! `build_ssa` turns a (possibly multiply-assigned) transport procedure into
//! SSA with phi nodes; `validate_ir` checks the SSA invariants and reports
//! every violation as data rather than failing.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::transport::{Block, Inst, Label, Name, Phi, Terminator, TransportProcedure};

/// Counts every SSA construction performed by the process. The optimizer's
/// `Estimate()` path is required to never build IR; tests assert on this.
static SSA_BUILDS: AtomicU64 = AtomicU64::new(0);

pub fn ssa_build_count() -> u64 {
    SSA_BUILDS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcedureIR {
    pub name: String,
    pub param_count: u32,
    pub blocks: Vec<Block>,
}

impl ProcedureIR {
    pub fn cfg(&self) -> Cfg {
        Cfg::new(&self.blocks)
    }

    pub fn block(&self, label: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.label == label)
    }

    /// SSA name -> (block index, position). Phis use position `usize::MAX`
    /// to mark "at block start". Parameters are not in the table.
    pub fn value_table(&self) -> HashMap<&Name, (usize, usize)> {
        let mut table = HashMap::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for phi in &block.phis {
                table.insert(&phi.dest, (bi, usize::MAX));
            }
            for (ii, inst) in block.insts.iter().enumerate() {
                if let Some(d) = inst.dest() {
                    table.insert(d, (bi, ii));
                }
            }
        }
        table
    }

    /// View as a transport procedure (the forms share block structure).
    pub fn to_transport(&self) -> TransportProcedure {
        TransportProcedure {
            name: self.name.clone(),
            param_count: self.param_count,
            blocks: self.blocks.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// CFG + dominators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Cfg {
    pub index: HashMap<Label, usize>,
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
}

impl Cfg {
    pub fn new(blocks: &[Block]) -> Self {
        let index: HashMap<Label, usize> =
            blocks.iter().enumerate().map(|(i, b)| (b.label.clone(), i)).collect();
        let mut succs = vec![Vec::new(); blocks.len()];
        let mut preds = vec![Vec::new(); blocks.len()];
        for (i, block) in blocks.iter().enumerate() {
            for target in block.term.successors() {
                if let Some(&t) = index.get(target) {
                    if !succs[i].contains(&t) {
                        succs[i].push(t);
                    }
                    if !preds[t].contains(&i) {
                        preds[t].push(i);
                    }
                }
            }
        }
        Cfg { index, succs, preds }
    }

    /// Blocks reachable from the entry (index 0).
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.succs.len()];
        if seen.is_empty() {
            return seen;
        }
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(b) = stack.pop() {
            for &s in &self.succs[b] {
                if !seen[s] {
                    seen[s] = true;
                    stack.push(s);
                }
            }
        }
        seen
    }

    /// Reverse postorder from the entry.
    pub fn rpo(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.succs.len());
        let mut seen = vec![false; self.succs.len()];
        // Iterative DFS with explicit post stack.
        let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
        if self.succs.is_empty() {
            return order;
        }
        seen[0] = true;
        while let Some(&mut (b, ref mut next)) = stack.last_mut() {
            if *next < self.succs[b].len() {
                let s = self.succs[b][*next];
                *next += 1;
                if !seen[s] {
                    seen[s] = true;
                    stack.push((s, 0));
                }
            } else {
                order.push(b);
                stack.pop();
            }
        }
        order.reverse();
        order
    }

    /// Immediate dominators (entry maps to itself). Unreachable blocks get
    /// `usize::MAX`.
    pub fn idoms(&self) -> Vec<usize> {
        let rpo = self.rpo();
        let mut rpo_pos = vec![usize::MAX; self.succs.len()];
        for (i, &b) in rpo.iter().enumerate() {
            rpo_pos[b] = i;
        }
        let mut idom = vec![usize::MAX; self.succs.len()];
        idom[0] = 0;
        let mut changed = true;
        while changed {
            changed = false;
            for &b in rpo.iter().skip(1) {
                let mut new_idom = usize::MAX;
                for &p in &self.preds[b] {
                    if idom[p] == usize::MAX {
                        continue;
                    }
                    new_idom = if new_idom == usize::MAX {
                        p
                    } else {
                        intersect(&idom, &rpo_pos, p, new_idom)
                    };
                }
                if new_idom != usize::MAX && idom[b] != new_idom {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }
        idom
    }

    pub fn dominance_frontiers(&self, idom: &[usize]) -> Vec<Vec<usize>> {
        let mut df = vec![Vec::new(); self.succs.len()];
        for b in 0..self.succs.len() {
            if self.preds[b].len() < 2 {
                continue;
            }
            for &p in &self.preds[b] {
                if idom[p] == usize::MAX {
                    continue;
                }
                let mut runner = p;
                while runner != idom[b] {
                    if !df[runner].contains(&b) {
                        df[runner].push(b);
                    }
                    if runner == idom[runner] {
                        break;
                    }
                    runner = idom[runner];
                }
            }
        }
        df
    }

    /// Back edges (source, target) per depth-first numbering: an edge to a
    /// block currently on the DFS stack.
    pub fn back_edges(&self) -> Vec<(usize, usize)> {
        let n = self.succs.len();
        let mut state = vec![0u8; n]; // 0 unvisited, 1 on stack, 2 done
        let mut edges = Vec::new();
        if n == 0 {
            return edges;
        }
        let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
        state[0] = 1;
        while let Some(&mut (b, ref mut next)) = stack.last_mut() {
            if *next < self.succs[b].len() {
                let s = self.succs[b][*next];
                *next += 1;
                match state[s] {
                    0 => {
                        state[s] = 1;
                        stack.push((s, 0));
                    }
                    1 => edges.push((b, s)),
                    _ => {}
                }
            } else {
                state[b] = 2;
                stack.pop();
            }
        }
        edges
    }

    /// Does `a` dominate `b`?
    pub fn dominates(idom: &[usize], a: usize, b: usize) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            if cur == 0 || idom[cur] == usize::MAX {
                return a == 0 && cur == 0;
            }
            let next = idom[cur];
            if next == cur {
                return false;
            }
            cur = next;
        }
    }
}

fn intersect(idom: &[usize], rpo_pos: &[usize], mut a: usize, mut b: usize) -> usize {
    while a != b {
        while rpo_pos[a] > rpo_pos[b] {
            a = idom[a];
        }
        while rpo_pos[b] > rpo_pos[a] {
            b = idom[b];
        }
    }
    a
}

// ---------------------------------------------------------------------------
// SSA construction
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("value `{0}` may be used before definition")]
    UndefinedOnPath(Name),
    #[error("phi in block `{0}` does not match its predecessors")]
    PhiPredecessorMismatch(Label),
    #[error("procedure has no blocks")]
    Empty,
}

pub fn build_ssa(p: &TransportProcedure) -> Result<ProcedureIR, BuildError> {
    SSA_BUILDS.fetch_add(1, Ordering::Relaxed);
    if p.blocks.is_empty() {
        return Err(BuildError::Empty);
    }

    // Drop unreachable blocks; they cannot affect semantics and the SSA
    // validator rejects them.
    let cfg_full = Cfg::new(&p.blocks);
    let reachable = cfg_full.reachable();
    let blocks: Vec<Block> = p
        .blocks
        .iter()
        .zip(&reachable)
        .filter(|(_, &r)| r)
        .map(|(b, _)| b.clone())
        .collect();
    let cfg = Cfg::new(&blocks);
    let idom = cfg.idoms();
    let df = cfg.dominance_frontiers(&idom);

    // Pre-existing phis must already agree with their predecessors.
    for (bi, block) in blocks.iter().enumerate() {
        for phi in &block.phis {
            let mut labels: Vec<&str> = phi.incomings.iter().map(|(l, _)| l.as_str()).collect();
            labels.sort_unstable();
            let mut preds: Vec<&str> =
                cfg.preds[bi].iter().map(|&pi| blocks[pi].label.as_str()).collect();
            preds.sort_unstable();
            if labels != preds {
                return Err(BuildError::PhiPredecessorMismatch(block.label.clone()));
            }
        }
    }

    // Definition sites per variable (params define at entry).
    let mut def_sites: HashMap<Name, Vec<usize>> = HashMap::new();
    let mut def_counts: HashMap<Name, usize> = HashMap::new();
    for i in 0..p.param_count {
        let name = TransportProcedure::param_name(i);
        def_sites.entry(name.clone()).or_default().push(0);
        *def_counts.entry(name).or_default() += 1;
    }
    for (bi, block) in blocks.iter().enumerate() {
        for phi in &block.phis {
            def_sites.entry(phi.dest.clone()).or_default().push(bi);
            *def_counts.entry(phi.dest.clone()).or_default() += 1;
        }
        for inst in &block.insts {
            if let Some(d) = inst.dest() {
                def_sites.entry(d.clone()).or_default().push(bi);
                *def_counts.entry(d.clone()).or_default() += 1;
            }
        }
    }

    // Semi-pruned: only variables that are live across a block boundary
    // (used in some block before any local definition) get phis.
    let mut cross_block: HashSet<Name> = HashSet::new();
    for block in &blocks {
        let mut local_defs: HashSet<&Name> = HashSet::new();
        for phi in &block.phis {
            for (_, v) in &phi.incomings {
                // Phi operands are uses on the incoming edge.
                cross_block.insert(v.clone());
            }
            local_defs.insert(&phi.dest);
        }
        let mut note_use = |v: &Name, local_defs: &HashSet<&Name>| {
            if !local_defs.contains(v) {
                cross_block.insert(v.clone());
            }
        };
        for inst in &block.insts {
            for u in inst.uses() {
                note_use(u, &local_defs);
            }
            if let Some(d) = inst.dest() {
                local_defs.insert(d);
            }
        }
        match &block.term {
            Terminator::BrIf { cond, .. } => note_use(cond, &local_defs),
            Terminator::Ret(v) => note_use(v, &local_defs),
            Terminator::Br(_) => {}
        }
    }

    // Phi insertion at iterated dominance frontiers.
    let mut work = Vec::new();
    let mut inserted: Vec<Vec<Name>> = vec![Vec::new(); blocks.len()]; // phi vars per block
    for (var, sites) in &def_sites {
        if def_counts[var] < 2 || !cross_block.contains(var) {
            continue;
        }
        let mut has_phi: HashSet<usize> = HashSet::new();
        work.clear();
        work.extend(sites.iter().copied());
        let mut on_work: HashSet<usize> = sites.iter().copied().collect();
        while let Some(b) = work.pop() {
            for &f in &df[b] {
                if has_phi.insert(f) {
                    inserted[f].push(var.clone());
                    if on_work.insert(f) {
                        work.push(f);
                    }
                }
            }
        }
    }
    for vars in &mut inserted {
        vars.sort_unstable();
    }

    Renamer::run(blocks, cfg, idom, inserted, p)
}

struct Renamer {
    blocks: Vec<Block>,
    cfg: Cfg,
    /// Inserted phi vars per block, parallel to growing `new_phis`.
    inserted_vars: Vec<Vec<Name>>,
    /// Operands collected for inserted phis: block -> var -> (pred label, name).
    inserted_ops: Vec<HashMap<Name, Vec<(Label, Name)>>>,
    /// Renamed operands for pre-existing phis: block -> phi idx -> ops.
    existing_ops: Vec<Vec<Vec<(Label, Name)>>>,
    stacks: HashMap<Name, Vec<Name>>,
    versions: HashMap<Name, usize>,
    taken: HashSet<Name>,
    children: Vec<Vec<usize>>,
}

impl Renamer {
    fn run(
        blocks: Vec<Block>,
        cfg: Cfg,
        idom: Vec<usize>,
        inserted_vars: Vec<Vec<Name>>,
        p: &TransportProcedure,
    ) -> Result<ProcedureIR, BuildError> {
        let mut children = vec![Vec::new(); blocks.len()];
        for b in 1..blocks.len() {
            if idom[b] != usize::MAX {
                children[idom[b]].push(b);
            }
        }
        let mut taken: HashSet<Name> = HashSet::new();
        for block in &blocks {
            for phi in &block.phis {
                taken.insert(phi.dest.clone());
            }
            for inst in &block.insts {
                if let Some(d) = inst.dest() {
                    taken.insert(d.clone());
                }
            }
        }
        let existing_ops = blocks.iter().map(|b| vec![Vec::new(); b.phis.len()]).collect();
        let inserted_ops = vec![HashMap::new(); blocks.len()];
        let mut renamer = Renamer {
            blocks,
            cfg,
            inserted_vars,
            inserted_ops,
            existing_ops,
            stacks: HashMap::new(),
            versions: HashMap::new(),
            taken,
            children,
        };
        for i in 0..p.param_count {
            let name = TransportProcedure::param_name(i);
            renamer.stacks.entry(name.clone()).or_default().push(name.clone());
            renamer.versions.insert(name, 1);
        }
        renamer.walk(0)?;
        renamer.finish(p)
    }

    fn fresh(&mut self, var: &Name) -> Name {
        let version = self.versions.entry(var.clone()).or_insert(0);
        if *version == 0 {
            // First definition keeps the original name, so procedures that
            // are already single-assignment come out unchanged.
            *version = 1;
            return var.clone();
        }
        loop {
            let candidate = format!("{var}.{version}");
            *version += 1;
            if self.taken.insert(candidate.clone()) {
                return candidate;
            }
        }
    }

    fn top(&self, var: &Name) -> Result<Name, BuildError> {
        self.stacks
            .get(var)
            .and_then(|s| s.last())
            .cloned()
            .ok_or_else(|| BuildError::UndefinedOnPath(var.clone()))
    }

    fn walk(&mut self, b: usize) -> Result<(), BuildError> {
        let mut pushed: Vec<Name> = Vec::new();
        let push_def = |this: &mut Self, var: &Name, pushed: &mut Vec<Name>| {
            let new = this.fresh(var);
            this.stacks.entry(var.clone()).or_default().push(new.clone());
            pushed.push(var.clone());
            new
        };

        // Inserted phis define first, then pre-existing phis.
        let inserted_here = self.inserted_vars[b].clone();
        let mut inserted_defs: Vec<(Name, Name)> = Vec::new(); // (var, new dest)
        for var in &inserted_here {
            let new = push_def(self, var, &mut pushed);
            inserted_defs.push((var.clone(), new));
        }
        let phi_count = self.blocks[b].phis.len();
        for pi in 0..phi_count {
            let var = self.blocks[b].phis[pi].dest.clone();
            let new = push_def(self, &var, &mut pushed);
            self.blocks[b].phis[pi].dest = new;
        }

        for ii in 0..self.blocks[b].insts.len() {
            let mut inst = self.blocks[b].insts[ii].clone();
            for u in inst.uses_mut() {
                *u = self.top(u)?;
            }
            if let Some(d) = inst.dest().cloned() {
                let new = push_def(self, &d, &mut pushed);
                set_dest(&mut inst, new);
            }
            self.blocks[b].insts[ii] = inst;
        }
        let mut term = self.blocks[b].term.clone();
        match &mut term {
            Terminator::BrIf { cond, .. } => *cond = self.top(cond)?,
            Terminator::Ret(v) => *v = self.top(v)?,
            Terminator::Br(_) => {}
        }
        self.blocks[b].term = term;

        // Feed phi operands of successors for the edges out of this block.
        let label = self.blocks[b].label.clone();
        for si in 0..self.cfg.succs[b].len() {
            let s = self.cfg.succs[b][si];
            let vars = self.inserted_vars[s].clone();
            for var in vars {
                let top = self.top(&var)?;
                self.inserted_ops[s]
                    .entry(var)
                    .or_default()
                    .push((label.clone(), top.clone()));
            }
            for pi in 0..self.blocks[s].phis.len() {
                // Pre-existing phi: find the operand tagged with our label in
                // the original (its operand names are still original).
                let original = self.blocks[s].phis[pi]
                    .incomings
                    .iter()
                    .find(|(l, _)| *l == label)
                    .map(|(_, v)| v.clone());
                if let Some(orig) = original {
                    let renamed = self.top(&orig)?;
                    self.existing_ops[s][pi].push((label.clone(), renamed));
                }
            }
        }

        let kids = self.children[b].clone();
        for child in kids {
            self.walk(child)?;
        }
        // Record the renamed dests for inserted phis before popping.
        self.inserted_ops[b].insert(
            "\0dests".into(),
            inserted_defs.iter().map(|(v, n)| (v.clone(), n.clone())).collect(),
        );
        for var in pushed {
            self.stacks.get_mut(&var).unwrap().pop();
        }
        Ok(())
    }

    fn finish(mut self, p: &TransportProcedure) -> Result<ProcedureIR, BuildError> {
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            // Overwrite pre-existing phi operands with renamed versions.
            for (pi, phi) in block.phis.iter_mut().enumerate() {
                if !self.existing_ops[bi][pi].is_empty() {
                    phi.incomings = std::mem::take(&mut self.existing_ops[bi][pi]);
                    phi.incomings.sort();
                }
            }
            // Materialize inserted phis.
            let dests: HashMap<Name, Name> = self.inserted_ops[bi]
                .remove("\0dests")
                .map(|v| v.into_iter().collect())
                .unwrap_or_default();
            let mut new_phis = Vec::new();
            for var in &self.inserted_vars[bi] {
                let mut incomings = self.inserted_ops[bi].remove(var).unwrap_or_default();
                incomings.sort();
                incomings.dedup();
                new_phis.push(Phi { dest: dests[var].clone(), incomings });
            }
            new_phis.extend(std::mem::take(&mut block.phis));
            block.phis = new_phis;
        }
        Ok(ProcedureIR { name: p.name.clone(), param_count: p.param_count, blocks: self.blocks })
    }
}

fn set_dest(inst: &mut Inst, new: Name) {
    match inst {
        Inst::Const { dest, .. }
        | Inst::Bin { dest, .. }
        | Inst::Call { dest, .. }
        | Inst::CallIndirect { dest, .. }
        | Inst::ProcRef { dest, .. }
        | Inst::LoadGlobal { dest, .. }
        | Inst::NewObj { dest, .. }
        | Inst::LoadField { dest, .. } => *dest = new,
        _ => {}
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MultipleDefinitions { name: Name },
    UseNotDominated { name: Name, block: Label },
    PhiPredecessorMismatch { phi: Name, block: Label },
    UnknownBranchTarget { block: Label, target: Label },
    UnreachableBlock { block: Label },
    UndefinedUse { name: Name, block: Label },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MultipleDefinitions { name } => {
                write!(f, "value `{name}` defined more than once")
            }
            Violation::UseNotDominated { name, block } => {
                write!(f, "use of `{name}` in block `{block}` not dominated by its definition")
            }
            Violation::PhiPredecessorMismatch { phi, block } => {
                write!(f, "phi `{phi}` in block `{block}` does not match predecessors")
            }
            Violation::UnknownBranchTarget { block, target } => {
                write!(f, "block `{block}` branches to unknown `{target}`")
            }
            Violation::UnreachableBlock { block } => write!(f, "block `{block}` is unreachable"),
            Violation::UndefinedUse { name, block } => {
                write!(f, "use of undefined value `{name}` in block `{block}`")
            }
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_ir(ir: &ProcedureIR) -> ValidationReport {
    let mut report = ValidationReport::default();
    let cfg = ir.cfg();

    for (bi, block) in ir.blocks.iter().enumerate() {
        for target in block.term.successors() {
            if !cfg.index.contains_key(target) {
                report.violations.push(Violation::UnknownBranchTarget {
                    block: block.label.clone(),
                    target: target.clone(),
                });
            }
        }
        let mut labels: Vec<&str> = Vec::new();
        for phi in &block.phis {
            labels.clear();
            labels.extend(phi.incomings.iter().map(|(l, _)| l.as_str()));
            labels.sort_unstable();
            let mut preds: Vec<&str> =
                cfg.preds[bi].iter().map(|&p| ir.blocks[p].label.as_str()).collect();
            preds.sort_unstable();
            if labels != preds {
                report.violations.push(Violation::PhiPredecessorMismatch {
                    phi: phi.dest.clone(),
                    block: block.label.clone(),
                });
            }
        }
    }

    for (bi, reachable) in cfg.reachable().iter().enumerate() {
        if !reachable {
            report
                .violations
                .push(Violation::UnreachableBlock { block: ir.blocks[bi].label.clone() });
        }
    }

    // Single definition.
    let mut defs: HashMap<&Name, (usize, usize)> = HashMap::new();
    let mut multiple: HashSet<&Name> = HashSet::new();
    for (bi, block) in ir.blocks.iter().enumerate() {
        for phi in &block.phis {
            if defs.insert(&phi.dest, (bi, usize::MAX)).is_some() {
                multiple.insert(&phi.dest);
            }
        }
        for (ii, inst) in block.insts.iter().enumerate() {
            if let Some(d) = inst.dest() {
                if defs.insert(d, (bi, ii)).is_some() {
                    multiple.insert(d);
                }
            }
        }
    }
    for name in &multiple {
        report.violations.push(Violation::MultipleDefinitions { name: (*name).clone() });
    }

    // Dominance of uses.
    let idom = cfg.idoms();
    let params: HashSet<Name> =
        (0..ir.param_count).map(TransportProcedure::param_name).collect();
    let check_use = |name: &Name, use_block: usize, use_pos: usize, report: &mut ValidationReport| {
        if params.contains(name) {
            return;
        }
        match defs.get(name) {
            None => report.violations.push(Violation::UndefinedUse {
                name: name.clone(),
                block: ir.blocks[use_block].label.clone(),
            }),
            Some(&(db, dp)) => {
                let ok = if db == use_block {
                    dp == usize::MAX && use_pos != usize::MAX || dp < use_pos
                } else {
                    Cfg::dominates(&idom, db, use_block)
                };
                if !ok {
                    report.violations.push(Violation::UseNotDominated {
                        name: name.clone(),
                        block: ir.blocks[use_block].label.clone(),
                    });
                }
            }
        }
    };
    for (bi, block) in ir.blocks.iter().enumerate() {
        for phi in &block.phis {
            for (lbl, v) in &phi.incomings {
                // The def must dominate the end of the incoming block.
                if let Some(&pred) = cfg.index.get(lbl) {
                    check_use(v, pred, usize::MAX - 1, &mut report);
                }
            }
        }
        for (ii, inst) in block.insts.iter().enumerate() {
            for u in inst.uses() {
                check_use(u, bi, ii, &mut report);
            }
        }
        match &block.term {
            Terminator::BrIf { cond, .. } => check_use(cond, bi, usize::MAX - 1, &mut report),
            Terminator::Ret(v) => check_use(v, bi, usize::MAX - 1, &mut report),
            Terminator::Br(_) => {}
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::parse_transport;

    fn proc_ir(text: &str, name: &str) -> ProcedureIR {
        let m = parse_transport(text).unwrap();
        build_ssa(m.procedure(name).unwrap()).unwrap()
    }

    #[test]
    fn straight_line_unchanged() {
        let text = "module m\nproc f nparams 1\nblock b0\n  v0 = const 1\n  v1 = add p0 v0\n  ret v1\n";
        let m = parse_transport(text).unwrap();
        let p = m.procedure("f").unwrap();
        let ir = build_ssa(p).unwrap();
        assert_eq!(ir.blocks, p.blocks);
        assert!(validate_ir(&ir).is_clean());
    }

    #[test]
    fn diamond_gets_single_phi_at_join() {
        let text = "module m\nproc f nparams 1\n\
                    block b0\n  c = cmp_lt p0 p0\n  br_if c b1 b2\n\
                    block b1\n  x = const 1\n  br b3\n\
                    block b2\n  x = const 2\n  br b3\n\
                    block b3\n  r = add x x\n  ret r\n";
        let ir = proc_ir(text, "f");
        let join = ir.block("b3").unwrap();
        assert_eq!(join.phis.len(), 1);
        assert_eq!(join.phis[0].incomings.len(), 2);
        assert!(validate_ir(&ir).is_clean());
    }

    #[test]
    fn loop_carried_variable_gets_header_phi() {
        let text = "module m\nproc f nparams 1\n\
                    block b0\n  i = const 0\n  br loop\n\
                    block loop\n  one = const 1\n  i = add i one\n  c = cmp_lt i p0\n  br_if c loop exit\n\
                    block exit\n  ret i\n";
        let ir = proc_ir(text, "f");
        let header = ir.block("loop").unwrap();
        assert_eq!(header.phis.len(), 1);
        let labels: Vec<&str> =
            header.phis[0].incomings.iter().map(|(l, _)| l.as_str()).collect();
        assert!(labels.contains(&"b0") && labels.contains(&"loop"));
        assert!(validate_ir(&ir).is_clean());
    }

    #[test]
    fn validator_flags_use_before_definition() {
        let ir = ProcedureIR {
            name: "f".into(),
            param_count: 0,
            blocks: vec![Block {
                label: "b0".into(),
                phis: vec![],
                insts: vec![
                    Inst::Bin {
                        dest: "a".into(),
                        op: crate::transport::BinOp::Add,
                        lhs: "b".into(),
                        rhs: "b".into(),
                    },
                    Inst::Const { dest: "b".into(), value: 1 },
                ],
                term: Terminator::Ret("a".into()),
            }],
        };
        let report = validate_ir(&ir);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UseNotDominated { name, .. } if name == "b")));
    }

    #[test]
    fn validator_flags_phi_mismatch() {
        let ir = ProcedureIR {
            name: "f".into(),
            param_count: 0,
            blocks: vec![Block {
                label: "b0".into(),
                phis: vec![Phi {
                    dest: "x".into(),
                    incomings: vec![("nope".into(), "x".into())],
                }],
                insts: vec![],
                term: Terminator::Ret("x".into()),
            }],
        };
        let report = validate_ir(&ir);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::PhiPredecessorMismatch { phi, .. } if phi == "x")));
    }

    #[test]
    fn unreachable_blocks_dropped_by_build() {
        let text = "module m\nproc f nparams 0\n\
                    block b0\n  v = const 1\n  ret v\n\
                    block dead\n  w = const 2\n  ret w\n";
        let ir = proc_ir(text, "f");
        assert_eq!(ir.blocks.len(), 1);
        assert!(validate_ir(&ir).is_clean());
    }
}
