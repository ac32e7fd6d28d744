//! Transport format: the textual, line-oriented representation programs
//! arrive in, plus structural validation and printing.
//!
//! The grammar is deliberately small (one instruction per line, `#` comments):
//!
//! ```text
//! module NAME
//! global NAME = INT | &PROC
//! proc NAME nparams K [entry]
//! block LABEL
//! Vd = const INT
//! Vd = add|sub|mul|div|cmp_lt|cmp_eq Va Vb
//! Vd = phi [LBL:Va, ...]
//! Vd = call NAME (V...)
//! Vd = call_indirect Vf (V...)
//! Vd = proc_ref NAME
//! Vd = load_global NAME
//! store_global NAME Va
//! Vd = new_obj K
//! Vd = load_field Vo K
//! store_field Vo K Va
//! profile_inc CID
//! path_add W
//! path_commit BASE LIMIT
//! br LBL
//! br_if Vc LBL1 LBL2
//! ret Va
//! ```
//!
//! Procedure parameters are pre-bound to the names `p0 .. p{K-1}`.
//! `path_add` / `path_commit` are emitted by the path-profiling
//! instrumentation phase; they are accepted from source as well so that
//! instrumented procedures still round-trip through the printer.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

pub type Name = String;
pub type Label = String;

/// Initial value of a module-level global.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlobalInit {
    Int(i64),
    /// `&PROC`: the global starts out holding a procedure reference.
    Proc(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportModule {
    pub name: String,
    pub globals: Vec<(String, GlobalInit)>,
    pub procedures: Vec<TransportProcedure>,
    /// Procedure marked `entry`, if any. Executable modules have exactly one.
    pub entry: Option<String>,
}

impl TransportModule {
    /// All procedures are exported by name.
    pub fn exports(&self) -> impl Iterator<Item = &str> {
        self.procedures.iter().map(|p| p.name.as_str())
    }

    pub fn procedure(&self, name: &str) -> Option<&TransportProcedure> {
        self.procedures.iter().find(|p| p.name == name)
    }

    /// Global and procedure names referenced but not defined in this module.
    /// These must resolve against the runtime's tables at load time.
    pub fn imports(&self) -> Imports {
        let local_procs: HashSet<&str> = self.procedures.iter().map(|p| p.name.as_str()).collect();
        let local_globals: HashSet<&str> = self.globals.iter().map(|(n, _)| n.as_str()).collect();
        let mut imports = Imports::default();
        let mut see_proc = |n: &str| {
            if !local_procs.contains(n) && !imports.procedures.iter().any(|p| p == n) {
                imports.procedures.push(n.to_string());
            }
        };
        for (_, init) in &self.globals {
            if let GlobalInit::Proc(p) = init {
                see_proc(p);
            }
        }
        for proc in &self.procedures {
            for block in &proc.blocks {
                for inst in &block.insts {
                    match inst {
                        Inst::Call { callee, .. } => see_proc(callee),
                        Inst::ProcRef { proc: p, .. } => see_proc(p),
                        Inst::LoadGlobal { global, .. } | Inst::StoreGlobal { global, .. } => {
                            if !local_globals.contains(global.as_str())
                                && !imports.globals.iter().any(|g| g == global)
                            {
                                imports.globals.push(global.clone());
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        imports
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Imports {
    pub procedures: Vec<String>,
    pub globals: Vec<String>,
}

impl Imports {
    pub fn is_empty(&self) -> bool {
        self.procedures.is_empty() && self.globals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportProcedure {
    pub name: String,
    pub param_count: u32,
    pub blocks: Vec<Block>,
}

impl TransportProcedure {
    pub fn entry_block(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn block(&self, label: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.label == label)
    }

    /// Name bound to the i-th parameter on entry.
    pub fn param_name(i: u32) -> Name {
        format!("p{i}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: Label,
    pub phis: Vec<Phi>,
    pub insts: Vec<Inst>,
    pub term: Terminator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phi {
    pub dest: Name,
    pub incomings: Vec<(Label, Name)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    CmpLt,
    CmpEq,
}

impl BinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::CmpLt => "cmp_lt",
            BinOp::CmpEq => "cmp_eq",
        }
    }

    /// Two's-complement 64-bit evaluation. `Div` is the only trapping op.
    pub fn eval(self, a: i64, b: i64) -> Result<i64, DivByZero> {
        Ok(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div => {
                if b == 0 {
                    return Err(DivByZero);
                }
                a.wrapping_div(b)
            }
            BinOp::CmpLt => (a < b) as i64,
            BinOp::CmpEq => (a == b) as i64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivByZero;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inst {
    Const { dest: Name, value: i64 },
    Bin { dest: Name, op: BinOp, lhs: Name, rhs: Name },
    Call { dest: Name, callee: String, args: Vec<Name> },
    CallIndirect { dest: Name, target: Name, args: Vec<Name> },
    ProcRef { dest: Name, proc: String },
    LoadGlobal { dest: Name, global: String },
    StoreGlobal { global: String, src: Name },
    NewObj { dest: Name, fields: u32 },
    LoadField { dest: Name, obj: Name, index: u32 },
    StoreField { obj: Name, index: u32, src: Name },
    /// Bump profiling counter CID. Instrumentation overhead: advances the
    /// clock but is excluded from self cost.
    ProfileInc { counter: u32 },
    /// Add W to the frame's path register (path-profiling instrumentation).
    PathAdd { value: u64 },
    /// Bump counter `base + path_register` if the register is below `limit`,
    /// then reset the register.
    PathCommit { base: u32, limit: u32 },
}

impl Inst {
    pub fn dest(&self) -> Option<&Name> {
        match self {
            Inst::Const { dest, .. }
            | Inst::Bin { dest, .. }
            | Inst::Call { dest, .. }
            | Inst::CallIndirect { dest, .. }
            | Inst::ProcRef { dest, .. }
            | Inst::LoadGlobal { dest, .. }
            | Inst::NewObj { dest, .. }
            | Inst::LoadField { dest, .. } => Some(dest),
            _ => None,
        }
    }

    pub fn uses(&self) -> Vec<&Name> {
        match self {
            Inst::Bin { lhs, rhs, .. } => vec![lhs, rhs],
            Inst::Call { args, .. } => args.iter().collect(),
            Inst::CallIndirect { target, args, .. } => {
                let mut v = vec![target];
                v.extend(args.iter());
                v
            }
            Inst::LoadField { obj, .. } => vec![obj],
            Inst::StoreField { obj, src, .. } => vec![obj, src],
            Inst::StoreGlobal { src, .. } => vec![src],
            _ => vec![],
        }
    }

    pub fn uses_mut(&mut self) -> Vec<&mut Name> {
        match self {
            Inst::Bin { lhs, rhs, .. } => vec![lhs, rhs],
            Inst::Call { args, .. } => args.iter_mut().collect(),
            Inst::CallIndirect { target, args, .. } => {
                let mut v = vec![target];
                v.extend(args.iter_mut());
                v
            }
            Inst::LoadField { obj, .. } => vec![obj],
            Inst::StoreField { obj, src, .. } => vec![obj, src],
            Inst::StoreGlobal { src, .. } => vec![src],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Br(Label),
    BrIf { cond: Name, then_label: Label, else_label: Label },
    Ret(Name),
}

impl Terminator {
    pub fn successors(&self) -> Vec<&Label> {
        match self {
            Terminator::Br(l) => vec![l],
            Terminator::BrIf { then_label, else_label, .. } => vec![then_label, else_label],
            Terminator::Ret(_) => vec![],
        }
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate name `{name}`")]
    DuplicateName { name: String },
    #[error("unresolved reference `{name}` in procedure `{proc}`")]
    UnresolvedReference { name: String, proc: String },
    #[error("procedure `{proc}`: branch to undeclared block `{label}`")]
    UnknownBlock { proc: String, label: String },
    #[error("procedure `{proc}`, block `{label}`: malformed terminator")]
    MalformedTerminator { proc: String, label: String },
    #[error("more than one procedure marked entry")]
    MultipleEntries,
    #[error("module has no procedures")]
    EmptyModule,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

pub fn parse_transport(text: &str) -> Result<TransportModule, TransportError> {
    Parser::new(text).parse()
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

struct OpenBlock {
    label: Label,
    phis: Vec<Phi>,
    insts: Vec<Inst>,
    term: Option<Terminator>,
    line: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                let l = match l.find('#') {
                    Some(h) => &l[..h],
                    None => l,
                };
                (i + 1, l.trim())
            })
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Parser { lines, pos: 0 }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> TransportError {
        TransportError::Syntax { line, msg: msg.into() }
    }

    fn parse(mut self) -> Result<TransportModule, TransportError> {
        let (line, first) = *self
            .lines
            .first()
            .ok_or(TransportError::Syntax { line: 1, msg: "empty input".into() })?;
        let module_name = first
            .strip_prefix("module ")
            .map(str::trim)
            .filter(|n| is_ident(n))
            .ok_or_else(|| self.err(line, "expected `module NAME`"))?
            .to_string();
        self.pos = 1;

        let mut globals: Vec<(String, GlobalInit)> = Vec::new();
        let mut procedures: Vec<TransportProcedure> = Vec::new();
        let mut entry = None;

        while self.pos < self.lines.len() {
            let (line, text) = self.lines[self.pos];
            if let Some(rest) = text.strip_prefix("global ") {
                let (name, init) = parse_global(rest).ok_or_else(|| {
                    self.err(line, "expected `global NAME = INT` or `global NAME = &PROC`")
                })?;
                if globals.iter().any(|(n, _)| *n == name) {
                    return Err(TransportError::DuplicateName { name });
                }
                globals.push((name, init));
                self.pos += 1;
            } else if text.starts_with("proc ") {
                let (proc, is_entry) = self.parse_proc()?;
                if procedures.iter().any(|p| p.name == proc.name) {
                    return Err(TransportError::DuplicateName { name: proc.name });
                }
                if is_entry {
                    if entry.is_some() {
                        return Err(TransportError::MultipleEntries);
                    }
                    entry = Some(proc.name.clone());
                }
                procedures.push(proc);
            } else {
                return Err(self.err(line, format!("unexpected line `{text}`")));
            }
        }

        let module = TransportModule { name: module_name, globals, procedures, entry };
        validate_module(&module)?;
        Ok(module)
    }

    fn parse_proc(&mut self) -> Result<(TransportProcedure, bool), TransportError> {
        let (line, text) = self.lines[self.pos];
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || self.err(line, "expected `proc NAME nparams K [entry]`");
        if words.len() < 4 || words[0] != "proc" || words[2] != "nparams" {
            return Err(bad());
        }
        let name = words[1].to_string();
        if !is_ident(&name) {
            return Err(bad());
        }
        let param_count: u32 = words[3].parse().map_err(|_| bad())?;
        let is_entry = match words.len() {
            4 => false,
            5 if words[4] == "entry" => true,
            _ => return Err(bad()),
        };
        self.pos += 1;

        let mut blocks: Vec<Block> = Vec::new();
        let mut open: Option<OpenBlock> = None;
        loop {
            let next = self.lines.get(self.pos).copied();
            let at_boundary = match next {
                None => true,
                Some((_, t)) => t.starts_with("proc ") || t.starts_with("global "),
            };
            if at_boundary {
                if let Some(b) = open.take() {
                    blocks.push(close_block(&name, b)?);
                }
                break;
            }
            let (line, text) = next.unwrap();
            if let Some(rest) = text.strip_prefix("block ") {
                let label = rest.trim().to_string();
                if !is_ident(&label) {
                    return Err(self.err(line, "expected `block LABEL`"));
                }
                if let Some(b) = open.take() {
                    blocks.push(close_block(&name, b)?);
                }
                open = Some(OpenBlock { label, phis: Vec::new(), insts: Vec::new(), term: None, line });
                self.pos += 1;
                continue;
            }
            let block = open
                .as_mut()
                .ok_or_else(|| self.err(line, "instruction before first `block`"))?;
            if block.term.is_some() {
                return Err(self.err(line, "instruction after terminator"));
            }
            match parse_inst_line(text).map_err(|msg| TransportError::Syntax { line, msg })? {
                Parsed::Phi(phi) => {
                    if !block.insts.is_empty() {
                        return Err(self.err(line, "phi must appear at block start"));
                    }
                    block.phis.push(phi);
                }
                Parsed::Inst(i) => block.insts.push(i),
                Parsed::Term(t) => block.term = Some(t),
            }
            self.pos += 1;
        }

        if blocks.is_empty() {
            return Err(self.err(line, format!("procedure `{name}` has no blocks")));
        }
        Ok((TransportProcedure { name, param_count, blocks }, is_entry))
    }
}

fn close_block(proc: &str, b: OpenBlock) -> Result<Block, TransportError> {
    match b.term {
        Some(term) => Ok(Block { label: b.label, phis: b.phis, insts: b.insts, term }),
        None => Err(TransportError::Syntax {
            line: b.line,
            msg: format!("block `{}` in `{proc}` lacks a terminator", b.label),
        }),
    }
}

enum Parsed {
    Phi(Phi),
    Inst(Inst),
    Term(Terminator),
}

fn parse_global(rest: &str) -> Option<(String, GlobalInit)> {
    let (name, value) = rest.split_once('=')?;
    let name = name.trim().to_string();
    if !is_ident(&name) {
        return None;
    }
    let value = value.trim();
    let init = if let Some(proc) = value.strip_prefix('&') {
        if !is_ident(proc) {
            return None;
        }
        GlobalInit::Proc(proc.to_string())
    } else {
        GlobalInit::Int(value.parse().ok()?)
    };
    Some((name, init))
}

fn parse_inst_line(text: &str) -> Result<Parsed, String> {
    if let Some((dest, rhs)) = text.split_once('=') {
        let dest = dest.trim();
        if !is_ident(dest) {
            return Err(format!("bad destination `{dest}`"));
        }
        return parse_assignment(dest.to_string(), rhs.trim());
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    match words.as_slice() {
        ["store_global", g, v] if is_ident(g) && is_ident(v) => {
            Ok(Parsed::Inst(Inst::StoreGlobal { global: g.to_string(), src: v.to_string() }))
        }
        ["store_field", o, k, v] if is_ident(o) && is_ident(v) => {
            let index = k.parse().map_err(|_| "bad field index")?;
            Ok(Parsed::Inst(Inst::StoreField { obj: o.to_string(), index, src: v.to_string() }))
        }
        ["profile_inc", cid] => {
            let counter = cid.parse().map_err(|_| "bad counter id")?;
            Ok(Parsed::Inst(Inst::ProfileInc { counter }))
        }
        ["path_add", w] => {
            let value = w.parse().map_err(|_| "bad path increment")?;
            Ok(Parsed::Inst(Inst::PathAdd { value }))
        }
        ["path_commit", base, limit] => {
            let base = base.parse().map_err(|_| "bad counter base")?;
            let limit = limit.parse().map_err(|_| "bad path limit")?;
            Ok(Parsed::Inst(Inst::PathCommit { base, limit }))
        }
        ["br", l] if is_ident(l) => Ok(Parsed::Term(Terminator::Br(l.to_string()))),
        ["br_if", c, l1, l2] if is_ident(c) && is_ident(l1) && is_ident(l2) => {
            Ok(Parsed::Term(Terminator::BrIf {
                cond: c.to_string(),
                then_label: l1.to_string(),
                else_label: l2.to_string(),
            }))
        }
        ["ret", v] if is_ident(v) => Ok(Parsed::Term(Terminator::Ret(v.to_string()))),
        _ => Err(format!("unrecognized instruction `{text}`")),
    }
}

fn parse_assignment(dest: String, rhs: &str) -> Result<Parsed, String> {
    if let Some(rest) = rhs.strip_prefix("phi ") {
        let inner = rest
            .trim()
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or("phi operands must be `[LBL:V, ...]`")?;
        let mut incomings = Vec::new();
        for part in inner.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (lbl, v) = part.split_once(':').ok_or("phi operand must be `LBL:V`")?;
            let (lbl, v) = (lbl.trim(), v.trim());
            if !is_ident(lbl) || !is_ident(v) {
                return Err(format!("bad phi operand `{part}`"));
            }
            incomings.push((lbl.to_string(), v.to_string()));
        }
        if incomings.is_empty() {
            return Err("phi needs at least one operand".into());
        }
        return Ok(Parsed::Phi(Phi { dest, incomings }));
    }
    if let Some(rest) = rhs.strip_prefix("call_indirect ") {
        let (target, args) = parse_call_tail(rest)?;
        return Ok(Parsed::Inst(Inst::CallIndirect { dest, target, args }));
    }
    if let Some(rest) = rhs.strip_prefix("call ") {
        let (callee, args) = parse_call_tail(rest)?;
        return Ok(Parsed::Inst(Inst::Call { dest, callee, args }));
    }
    let words: Vec<&str> = rhs.split_whitespace().collect();
    match words.as_slice() {
        ["const", v] => {
            let value = v.parse().map_err(|_| format!("bad integer `{v}`"))?;
            Ok(Parsed::Inst(Inst::Const { dest, value }))
        }
        [op @ ("add" | "sub" | "mul" | "div" | "cmp_lt" | "cmp_eq"), a, b]
            if is_ident(a) && is_ident(b) =>
        {
            let op = match *op {
                "add" => BinOp::Add,
                "sub" => BinOp::Sub,
                "mul" => BinOp::Mul,
                "div" => BinOp::Div,
                "cmp_lt" => BinOp::CmpLt,
                _ => BinOp::CmpEq,
            };
            Ok(Parsed::Inst(Inst::Bin { dest, op, lhs: a.to_string(), rhs: b.to_string() }))
        }
        ["proc_ref", p] if is_ident(p) => {
            Ok(Parsed::Inst(Inst::ProcRef { dest, proc: p.to_string() }))
        }
        ["load_global", g] if is_ident(g) => {
            Ok(Parsed::Inst(Inst::LoadGlobal { dest, global: g.to_string() }))
        }
        ["new_obj", k] => {
            let fields = k.parse().map_err(|_| "bad field count")?;
            Ok(Parsed::Inst(Inst::NewObj { dest, fields }))
        }
        ["load_field", o, k] if is_ident(o) => {
            let index = k.parse().map_err(|_| "bad field index")?;
            Ok(Parsed::Inst(Inst::LoadField { dest, obj: o.to_string(), index }))
        }
        _ => Err(format!("unrecognized instruction `{rhs}`")),
    }
}

fn parse_call_tail(rest: &str) -> Result<(String, Vec<Name>), String> {
    let rest = rest.trim();
    let open = rest.find('(').ok_or("call needs `(args)`")?;
    let callee = rest[..open].trim().to_string();
    if !is_ident(&callee) {
        return Err(format!("bad call target `{callee}`"));
    }
    let args_text = rest[open + 1..].strip_suffix(')').ok_or("unclosed call arguments")?;
    let mut args = Vec::new();
    for a in args_text.split(',') {
        let a = a.trim();
        if a.is_empty() {
            continue;
        }
        if !is_ident(a) {
            return Err(format!("bad call argument `{a}`"));
        }
        args.push(a.to_string());
    }
    Ok((callee, args))
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

// ---------------------------------------------------------------------------
// Structural validation
// ---------------------------------------------------------------------------

fn validate_module(m: &TransportModule) -> Result<(), TransportError> {
    if m.procedures.is_empty() {
        return Err(TransportError::EmptyModule);
    }
    for proc in &m.procedures {
        validate_procedure(proc)?;
    }
    Ok(())
}

fn validate_procedure(p: &TransportProcedure) -> Result<(), TransportError> {
    let mut labels = HashSet::new();
    for block in &p.blocks {
        if !labels.insert(block.label.as_str()) {
            return Err(TransportError::DuplicateName { name: block.label.clone() });
        }
    }
    // Every value used must be assigned somewhere in the procedure or be a
    // parameter. (Transport form permits multiple assignments; dominance is
    // checked on the SSA form.)
    let mut defined: HashSet<Name> = (0..p.param_count).map(TransportProcedure::param_name).collect();
    for block in &p.blocks {
        for phi in &block.phis {
            defined.insert(phi.dest.clone());
        }
        for inst in &block.insts {
            if let Some(d) = inst.dest() {
                defined.insert(d.clone());
            }
        }
    }
    for block in &p.blocks {
        for target in block.term.successors() {
            if !labels.contains(target.as_str()) {
                return Err(TransportError::UnknownBlock {
                    proc: p.name.clone(),
                    label: target.clone(),
                });
            }
        }
        for phi in &block.phis {
            for (lbl, v) in &phi.incomings {
                if !labels.contains(lbl.as_str()) {
                    return Err(TransportError::UnknownBlock {
                        proc: p.name.clone(),
                        label: lbl.clone(),
                    });
                }
                if !defined.contains(v) {
                    return Err(TransportError::UnresolvedReference {
                        name: v.clone(),
                        proc: p.name.clone(),
                    });
                }
            }
        }
        let term_uses: Vec<&Name> = match &block.term {
            Terminator::BrIf { cond, .. } => vec![cond],
            Terminator::Ret(v) => vec![v],
            Terminator::Br(_) => vec![],
        };
        for inst_uses in block.insts.iter().map(Inst::uses).chain([term_uses]) {
            for used in inst_uses {
                if !defined.contains(used) {
                    return Err(TransportError::UnresolvedReference {
                        name: used.clone(),
                        proc: p.name.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Printing (round-trips through the parser)
// ---------------------------------------------------------------------------

pub fn print_module(m: &TransportModule) -> String {
    let mut out = String::new();
    use fmt::Write;
    writeln!(out, "module {}", m.name).unwrap();
    for (name, init) in &m.globals {
        match init {
            GlobalInit::Int(v) => writeln!(out, "global {name} = {v}").unwrap(),
            GlobalInit::Proc(p) => writeln!(out, "global {name} = &{p}").unwrap(),
        }
    }
    for proc in &m.procedures {
        let entry = if m.entry.as_deref() == Some(&proc.name) { " entry" } else { "" };
        writeln!(out, "proc {} nparams {}{}", proc.name, proc.param_count, entry).unwrap();
        for block in &proc.blocks {
            writeln!(out, "block {}", block.label).unwrap();
            for phi in &block.phis {
                let ops: Vec<String> =
                    phi.incomings.iter().map(|(l, v)| format!("{l}:{v}")).collect();
                writeln!(out, "  {} = phi [{}]", phi.dest, ops.join(", ")).unwrap();
            }
            for inst in &block.insts {
                writeln!(out, "  {}", print_inst(inst)).unwrap();
            }
            writeln!(out, "  {}", print_term(&block.term)).unwrap();
        }
    }
    out
}

pub fn print_inst(inst: &Inst) -> String {
    match inst {
        Inst::Const { dest, value } => format!("{dest} = const {value}"),
        Inst::Bin { dest, op, lhs, rhs } => format!("{dest} = {} {lhs} {rhs}", op.mnemonic()),
        Inst::Call { dest, callee, args } => format!("{dest} = call {callee} ({})", args.join(", ")),
        Inst::CallIndirect { dest, target, args } => {
            format!("{dest} = call_indirect {target} ({})", args.join(", "))
        }
        Inst::ProcRef { dest, proc } => format!("{dest} = proc_ref {proc}"),
        Inst::LoadGlobal { dest, global } => format!("{dest} = load_global {global}"),
        Inst::StoreGlobal { global, src } => format!("store_global {global} {src}"),
        Inst::NewObj { dest, fields } => format!("{dest} = new_obj {fields}"),
        Inst::LoadField { dest, obj, index } => format!("{dest} = load_field {obj} {index}"),
        Inst::StoreField { obj, index, src } => format!("store_field {obj} {index} {src}"),
        Inst::ProfileInc { counter } => format!("profile_inc {counter}"),
        Inst::PathAdd { value } => format!("path_add {value}"),
        Inst::PathCommit { base, limit } => format!("path_commit {base} {limit}"),
    }
}

pub fn print_term(term: &Terminator) -> String {
    match term {
        Terminator::Br(l) => format!("br {l}"),
        Terminator::BrIf { cond, then_label, else_label } => {
            format!("br_if {cond} {then_label} {else_label}")
        }
        Terminator::Ret(v) => format!("ret {v}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "module m\nproc main nparams 0 entry\nblock b0\n  v0 = const 42\n  ret v0\n";

    #[test]
    fn minimal_module_parses() {
        let m = parse_transport(MINIMAL).unwrap();
        assert_eq!(m.procedures.len(), 1);
        assert_eq!(m.procedures[0].blocks.len(), 1);
        assert_eq!(m.entry.as_deref(), Some("main"));
    }

    #[test]
    fn undefined_value_is_unresolved_reference() {
        let text = "module m\nproc main nparams 0 entry\nblock b0\n  v0 = const 42\n  ret v9\n";
        match parse_transport(text) {
            Err(TransportError::UnresolvedReference { name, .. }) => assert_eq!(name, "v9"),
            other => panic!("expected unresolved reference, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_procedure_name_rejected() {
        let text = "module m\n\
                    proc f nparams 0\nblock b0\n  v0 = const 1\n  ret v0\n\
                    proc f nparams 0\nblock b0\n  v0 = const 2\n  ret v0\n";
        match parse_transport(text) {
            Err(TransportError::DuplicateName { name }) => assert_eq!(name, "f"),
            other => panic!("expected duplicate name, got {other:?}"),
        }
    }

    #[test]
    fn missing_terminator_rejected() {
        let text = "module m\nproc main nparams 0 entry\nblock b0\n  v0 = const 42\n";
        assert!(matches!(parse_transport(text), Err(TransportError::Syntax { .. })));
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = "module m\nproc main nparams 0 entry\nblock b0\n  v0 = frobnicate 1 2\n  ret v0\n";
        match parse_transport(text) {
            Err(TransportError::Syntax { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn print_parse_round_trip() {
        let text = "module m\n\
                    global g = 7\n\
                    global h = &f\n\
                    proc f nparams 2\n\
                    block b0\n  v0 = add p0 p1\n  br_if v0 b1 b2\n\
                    block b1\n  v1 = const 1\n  br b3\n\
                    block b2\n  v2 = const 2\n  br b3\n\
                    block b3\n  v3 = phi [b1:v1, b2:v2]\n  ret v3\n\
                    proc main nparams 0 entry\n\
                    block b0\n  a = const 3\n  b = const 4\n  r = call f (a, b)\n  ret r\n";
        let m = parse_transport(text).unwrap();
        let printed = print_module(&m);
        let again = parse_transport(&printed).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn imports_collects_foreign_names() {
        let text = "module ext\n\
                    proc f2 nparams 1\nblock b0\n  ret p0\n\
                    proc init nparams 0 entry\n\
                    block b0\n  v0 = proc_ref f2\n  store_global g v0\n  v1 = call helper ()\n  ret v1\n";
        let m = parse_transport(text).unwrap();
        let imports = m.imports();
        assert_eq!(imports.globals, vec!["g"]);
        assert_eq!(imports.procedures, vec!["helper"]);
    }
}
