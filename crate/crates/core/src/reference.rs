//! Straight-line oracle interpreter over the transport form.
//!
//! This executes parsed modules directly: named environments with plain
//! reassignment, no SSA, no lowering, no clock, no handles. It exists so
//! results from the optimizing pipeline can be checked against a second,
//! much simpler implementation that shares none of its machinery.

use std::collections::HashMap;

use thiserror::Error;

use crate::transport::{GlobalInit, Inst, Terminator, TransportModule, TransportProcedure};

#[derive(Debug, Clone, PartialEq, Eq)]
enum RefValue {
    Int(i64),
    Obj(usize),
    Proc(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RefError {
    #[error("unknown procedure `{0}`")]
    UnknownProcedure(String),
    #[error("unknown global `{0}`")]
    UnknownGlobal(String),
    #[error("undefined name `{0}` in `{1}`")]
    Undefined(String, String),
    #[error("division by zero in `{0}`")]
    DivByZero(String),
    #[error("type error in `{0}`")]
    TypeError(String),
    #[error("field out of range in `{0}`")]
    FieldOutOfRange(String),
    #[error("arity mismatch calling `{0}`")]
    ArityMismatch(String),
    #[error("procedure returned a non-integer value")]
    NonIntResult,
    #[error("step budget exhausted")]
    Budget,
}

pub struct ReferenceInterpreter {
    procedures: HashMap<String, TransportProcedure>,
    globals: HashMap<String, RefValue>,
    heap: Vec<Vec<RefValue>>,
    steps: u64,
    budget: u64,
}

impl ReferenceInterpreter {
    pub fn new(module: &TransportModule) -> Self {
        let procedures = module
            .procedures
            .iter()
            .map(|p| (p.name.clone(), p.clone()))
            .collect();
        let globals = module
            .globals
            .iter()
            .map(|(name, init)| {
                let v = match init {
                    GlobalInit::Int(n) => RefValue::Int(*n),
                    GlobalInit::Proc(p) => RefValue::Proc(p.clone()),
                };
                (name.clone(), v)
            })
            .collect();
        ReferenceInterpreter {
            procedures,
            globals,
            heap: Vec::new(),
            steps: 0,
            budget: 50_000_000,
        }
    }

    /// Cap on executed instructions across one `invoke`; guards the oracle
    /// against fuzz inputs that loop forever.
    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    pub fn invoke(&mut self, proc: &str, args: &[i64]) -> Result<i64, RefError> {
        self.steps = 0;
        let values: Vec<RefValue> = args.iter().map(|&n| RefValue::Int(n)).collect();
        match self.call(proc, values)? {
            RefValue::Int(n) => Ok(n),
            _ => Err(RefError::NonIntResult),
        }
    }

    fn call(&mut self, proc: &str, args: Vec<RefValue>) -> Result<RefValue, RefError> {
        let p = self
            .procedures
            .get(proc)
            .cloned()
            .ok_or_else(|| RefError::UnknownProcedure(proc.to_string()))?;
        if args.len() != p.param_count as usize {
            return Err(RefError::ArityMismatch(proc.to_string()));
        }
        let mut env: HashMap<String, RefValue> = HashMap::new();
        for (i, v) in args.into_iter().enumerate() {
            env.insert(TransportProcedure::param_name(i as u32), v);
        }

        let index: HashMap<&str, usize> =
            p.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i)).collect();
        let mut cur = 0usize;
        let mut prev_label: Option<String> = None;

        loop {
            let block = &p.blocks[cur];

            // Phis read against the environment at block entry, in parallel.
            if !block.phis.is_empty() {
                let from = prev_label
                    .as_deref()
                    .ok_or_else(|| RefError::TypeError(proc.to_string()))?;
                let mut updates = Vec::new();
                for phi in &block.phis {
                    let src = phi
                        .incomings
                        .iter()
                        .find(|(l, _)| l == from)
                        .map(|(_, n)| n.clone())
                        .ok_or_else(|| RefError::Undefined(from.to_string(), proc.to_string()))?;
                    let v = lookup(&env, &src, proc)?;
                    updates.push((phi.dest.clone(), v));
                }
                for (dest, v) in updates {
                    env.insert(dest, v);
                }
            }

            for inst in &block.insts {
                self.steps += 1;
                if self.steps > self.budget {
                    return Err(RefError::Budget);
                }
                match inst {
                    Inst::Const { dest, value } => {
                        env.insert(dest.clone(), RefValue::Int(*value));
                    }
                    Inst::Bin { dest, op, lhs, rhs } => {
                        let a = int(&env, lhs, proc)?;
                        let b = int(&env, rhs, proc)?;
                        let v = op.eval(a, b).map_err(|_| RefError::DivByZero(proc.to_string()))?;
                        env.insert(dest.clone(), RefValue::Int(v));
                    }
                    Inst::Call { dest, callee, args } => {
                        let vals = args
                            .iter()
                            .map(|a| lookup(&env, a, proc))
                            .collect::<Result<Vec<_>, _>>()?;
                        let r = self.call(callee, vals)?;
                        env.insert(dest.clone(), r);
                    }
                    Inst::CallIndirect { dest, target, args } => {
                        let callee = match lookup(&env, target, proc)? {
                            RefValue::Proc(name) => name,
                            _ => return Err(RefError::TypeError(proc.to_string())),
                        };
                        let vals = args
                            .iter()
                            .map(|a| lookup(&env, a, proc))
                            .collect::<Result<Vec<_>, _>>()?;
                        let r = self.call(&callee, vals)?;
                        env.insert(dest.clone(), r);
                    }
                    Inst::ProcRef { dest, proc: target } => {
                        if !self.procedures.contains_key(target) {
                            return Err(RefError::UnknownProcedure(target.clone()));
                        }
                        env.insert(dest.clone(), RefValue::Proc(target.clone()));
                    }
                    Inst::LoadGlobal { dest, global } => {
                        let v = self
                            .globals
                            .get(global)
                            .cloned()
                            .ok_or_else(|| RefError::UnknownGlobal(global.clone()))?;
                        env.insert(dest.clone(), v);
                    }
                    Inst::StoreGlobal { global, src } => {
                        if !self.globals.contains_key(global) {
                            return Err(RefError::UnknownGlobal(global.clone()));
                        }
                        let v = lookup(&env, src, proc)?;
                        self.globals.insert(global.clone(), v);
                    }
                    Inst::NewObj { dest, fields } => {
                        let idx = self.heap.len();
                        self.heap.push(vec![RefValue::Int(0); *fields as usize]);
                        env.insert(dest.clone(), RefValue::Obj(idx));
                    }
                    Inst::LoadField { dest, obj, index: fi } => {
                        let o = obj_index(&env, obj, proc)?;
                        let v = self
                            .heap
                            .get(o)
                            .and_then(|f| f.get(*fi as usize))
                            .cloned()
                            .ok_or_else(|| RefError::FieldOutOfRange(proc.to_string()))?;
                        env.insert(dest.clone(), v);
                    }
                    Inst::StoreField { obj, index: fi, src } => {
                        let v = lookup(&env, src, proc)?;
                        let o = obj_index(&env, obj, proc)?;
                        let slot = self
                            .heap
                            .get_mut(o)
                            .and_then(|f| f.get_mut(*fi as usize))
                            .ok_or_else(|| RefError::FieldOutOfRange(proc.to_string()))?;
                        *slot = v;
                    }
                    // Instrumentation has no observable effect here.
                    Inst::ProfileInc { .. } | Inst::PathAdd { .. } | Inst::PathCommit { .. } => {}
                }
            }

            self.steps += 1;
            if self.steps > self.budget {
                return Err(RefError::Budget);
            }
            let next = match &block.term {
                Terminator::Ret(value) => return lookup(&env, value, proc),
                Terminator::Br(target) => target.clone(),
                Terminator::BrIf { cond, then_label, else_label } => {
                    let taken = match lookup(&env, cond, proc)? {
                        RefValue::Int(0) => false,
                        _ => true,
                    };
                    if taken { then_label.clone() } else { else_label.clone() }
                }
            };
            prev_label = Some(block.label.clone());
            cur = *index
                .get(next.as_str())
                .ok_or_else(|| RefError::Undefined(next.clone(), proc.to_string()))?;
        }
    }
}

fn lookup(env: &HashMap<String, RefValue>, name: &str, proc: &str) -> Result<RefValue, RefError> {
    env.get(name)
        .cloned()
        .ok_or_else(|| RefError::Undefined(name.to_string(), proc.to_string()))
}

fn int(env: &HashMap<String, RefValue>, name: &str, proc: &str) -> Result<i64, RefError> {
    match lookup(env, name, proc)? {
        RefValue::Int(n) => Ok(n),
        _ => Err(RefError::TypeError(proc.to_string())),
    }
}

fn obj_index(env: &HashMap<String, RefValue>, name: &str, proc: &str) -> Result<usize, RefError> {
    match lookup(env, name, proc)? {
        RefValue::Obj(o) => Ok(o),
        _ => Err(RefError::TypeError(proc.to_string())),
    }
}
