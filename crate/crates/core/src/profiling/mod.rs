//! Profiler subsystem: a manager broadcasting messages over a bus to
//! pluggable components, plus the shared instrumentation registry that
//! couples profilers to the optimizer's instrumentation phase.
//!
//! Components never patch running code themselves. Registering interest in a
//! measurement records a request in the [`InstrumentationRegistry`]; the
//! optimizer's instrumentation phase consults the registry the next time the
//! procedure passes through the pipeline and inserts the counters then.

pub mod components;
pub mod paths;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use thiserror::Error;

use crate::ir::ProcedureIR;
use crate::similarity::{is_stable, SimilarityParams};
use crate::transport::Label;
use crate::vm::Vm;

use paths::{enumerate_paths, PathError, PathPlan};

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestCode {
    /// 1: register interest — start measuring.
    Register,
    /// 2: query the current value.
    Query,
    /// 3: release — the value no longer needs to be measured.
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    PathCnt,
    BlockCnt,
    EdgeCnt,
    ProcHotness,
    /// Protocol-only: no shipped component handles cache-miss counts.
    MissCnt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Path { proc: String, id: u32 },
    Block { proc: String, label: Label },
    Edge { proc: String, from: Label, to: Label },
    Proc { proc: String },
    None,
}

impl Target {
    pub fn proc(&self) -> Option<&str> {
        match self {
            Target::Path { proc, .. }
            | Target::Block { proc, .. }
            | Target::Edge { proc, .. }
            | Target::Proc { proc } => Some(proc),
            Target::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Age,
    Similarity { proc: String },
    Measure { kind: MeasureKind, code: RequestCode, target: Target },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMessage {
    pub body: MessageBody,
    /// Set by any component that services the message.
    pub handled: bool,
    /// Counter value for queries; minimum similarity for SimilarityMsg.
    pub reply: Option<f64>,
}

impl ProfileMessage {
    pub fn age() -> Self {
        ProfileMessage { body: MessageBody::Age, handled: false, reply: None }
    }

    pub fn similarity(proc: &str) -> Self {
        ProfileMessage {
            body: MessageBody::Similarity { proc: proc.to_string() },
            handled: false,
            reply: None,
        }
    }

    pub fn measure(kind: MeasureKind, code: RequestCode, target: Target) -> Self {
        ProfileMessage {
            body: MessageBody::Measure { kind, code, target },
            handled: false,
            reply: None,
        }
    }

    /// Record a similarity observation: the reply keeps the minimum.
    pub fn note_similarity(&mut self, s: f64) {
        self.handled = true;
        self.reply = Some(match self.reply {
            Some(prev) => prev.min(s),
            None => s,
        });
    }
}

// ---------------------------------------------------------------------------
// Aging arithmetic
// ---------------------------------------------------------------------------

/// Multiplicative decay by 1/2 with round-half-away-from-zero, except that
/// results below 1 floor to 0 so counters are guaranteed to reach zero.
pub fn decay(count: u64) -> u64 {
    if count <= 1 {
        0
    } else {
        count.div_ceil(2)
    }
}

// ---------------------------------------------------------------------------
// Epoch history shared by the shipped components
// ---------------------------------------------------------------------------

/// Per-procedure counter vectors for the current and previous epochs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpochHistory {
    pub current: Vec<u64>,
    pub previous: Vec<u64>,
}

impl EpochHistory {
    pub fn with_len(n: usize) -> Self {
        EpochHistory { current: vec![0; n], previous: vec![0; n] }
    }

    pub fn add(&mut self, index: usize, delta: u64) {
        if self.current.len() <= index {
            self.current.resize(index + 1, 0);
        }
        self.current[index] += delta;
    }

    pub fn age(&mut self) {
        self.previous = self.current.clone();
        for c in &mut self.current {
            *c = decay(*c);
        }
    }

    pub fn similarity(&self, params: &SimilarityParams) -> f64 {
        use crate::similarity::{similarity, ProfileVector};
        similarity(
            &ProfileVector::from_counts(&self.previous),
            &ProfileVector::from_counts(&self.current),
            params,
        )
    }
}

// ---------------------------------------------------------------------------
// Instrumentation registry (shared with the optimizer)
// ---------------------------------------------------------------------------

/// A path plan armed for instrumentation, with its allocated counter ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmedPlan {
    pub plan: PathPlan,
    /// Counter ids `path_base .. path_base + num_paths` hold path counts.
    pub path_base: u32,
    /// One plain counter per back edge, parallel to `plan.back_edges`.
    pub back_edge_counters: Vec<u32>,
    /// False after release: the instrumentation phase stops inserting
    /// counters and the profiler stops reading them.
    pub active: bool,
}

#[derive(Debug, Default)]
pub struct InstrumentationRegistry {
    next_counter: u32,
    interest: BTreeSet<String>,
    plans: BTreeMap<String, ArmedPlan>,
}

pub type SharedRegistry = Rc<RefCell<InstrumentationRegistry>>;

impl InstrumentationRegistry {
    pub fn shared() -> SharedRegistry {
        Rc::new(RefCell::new(InstrumentationRegistry::default()))
    }

    pub fn register_interest(&mut self, proc: &str) {
        self.interest.insert(proc.to_string());
        if let Some(armed) = self.plans.get_mut(proc) {
            armed.active = true;
        }
    }

    pub fn release_interest(&mut self, proc: &str) {
        self.interest.remove(proc);
        if let Some(armed) = self.plans.get_mut(proc) {
            armed.active = false;
        }
    }

    pub fn interested(&self, proc: &str) -> bool {
        self.interest.contains(proc)
    }

    /// Called by the instrumentation phase with the procedure's fresh IR.
    /// Computes (or reuses) the plan and allocates counters on first arming.
    pub fn arm(&mut self, ir: &ProcedureIR) -> Result<&ArmedPlan, PathError> {
        if !self.plans.contains_key(&ir.name) {
            let plan = enumerate_paths(ir)?;
            let path_base = self.next_counter;
            self.next_counter += plan.num_paths;
            let back_edge_counters: Vec<u32> = plan
                .back_edges
                .iter()
                .map(|_| {
                    let c = self.next_counter;
                    self.next_counter += 1;
                    c
                })
                .collect();
            self.plans.insert(
                ir.name.clone(),
                ArmedPlan { plan, path_base, back_edge_counters, active: true },
            );
        }
        Ok(self.plans.get(&ir.name).unwrap())
    }

    pub fn plan(&self, proc: &str) -> Option<&ArmedPlan> {
        self.plans.get(proc)
    }

    pub fn armed_procs(&self) -> Vec<String> {
        self.plans.keys().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Bus + manager
// ---------------------------------------------------------------------------

pub trait ProfilingComponent {
    fn name(&self) -> &str;
    /// Handle or ignore the message. Components may re-broadcast through
    /// `system` (composition); the bus skips a component that is already on
    /// the delivery stack.
    fn handle(&mut self, system: &ProfilingSystem, msg: &mut ProfileMessage);
    /// Pull fresh raw data (counters, samples) out of the VM. Called at safe
    /// points between broadcasts.
    fn absorb(&mut self, _vm: &mut Vm) {}
    /// Procedures this component has profile data for.
    fn known_procs(&self) -> Vec<String> {
        Vec::new()
    }
    /// Line-oriented dump: epoch vectors and last S per procedure.
    fn dump(&self, _params: &SimilarityParams) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistrationId(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfilingError {
    #[error("profiling component `{0}` already registered")]
    DuplicateName(String),
}

struct Entry {
    id: RegistrationId,
    name: String,
    comp: Rc<RefCell<Box<dyn ProfilingComponent>>>,
}

pub struct ProfilingSystem {
    components: RefCell<Vec<Entry>>,
    next_id: std::cell::Cell<u64>,
    pub params: SimilarityParams,
}

impl ProfilingSystem {
    pub fn new(params: SimilarityParams) -> Self {
        ProfilingSystem {
            components: RefCell::new(Vec::new()),
            next_id: std::cell::Cell::new(1),
            params,
        }
    }

    pub fn register_component(
        &self,
        comp: Box<dyn ProfilingComponent>,
    ) -> Result<RegistrationId, ProfilingError> {
        let name = comp.name().to_string();
        let mut components = self.components.borrow_mut();
        if components.iter().any(|e| e.name == name) {
            return Err(ProfilingError::DuplicateName(name));
        }
        let id = RegistrationId(self.next_id.get());
        self.next_id.set(id.0 + 1);
        components.push(Entry { id, name, comp: Rc::new(RefCell::new(comp)) });
        Ok(id)
    }

    pub fn deregister(&self, id: RegistrationId) -> bool {
        let mut components = self.components.borrow_mut();
        let before = components.len();
        components.retain(|e| e.id != id);
        components.len() != before
    }

    pub fn component_names(&self) -> Vec<String> {
        self.components.borrow().iter().map(|e| e.name.clone()).collect()
    }

    /// Deliver to every component in registration order. Re-broadcasts from
    /// inside a handler run nested and synchronously; the re-broadcast skips
    /// the component currently handling (its cell is busy).
    pub fn broadcast(&self, msg: &mut ProfileMessage) {
        let snapshot: Vec<Rc<RefCell<Box<dyn ProfilingComponent>>>> =
            self.components.borrow().iter().map(|e| Rc::clone(&e.comp)).collect();
        for cell in snapshot {
            if let Ok(mut comp) = cell.try_borrow_mut() {
                comp.handle(self, msg);
            }
        }
    }

    pub fn age(&self) {
        let mut msg = ProfileMessage::age();
        self.broadcast(&mut msg);
    }

    /// Minimum similarity across handling components; unknown procedures
    /// are vacuously stable.
    pub fn stable_proc(&self, proc: &str) -> bool {
        let mut msg = ProfileMessage::similarity(proc);
        self.broadcast(&mut msg);
        match msg.reply {
            Some(min_s) => is_stable(min_s, &self.params),
            None => true,
        }
    }

    pub fn similarity_of(&self, proc: &str) -> Option<f64> {
        let mut msg = ProfileMessage::similarity(proc);
        self.broadcast(&mut msg);
        msg.reply
    }

    pub fn absorb(&self, vm: &mut Vm) {
        let snapshot: Vec<Rc<RefCell<Box<dyn ProfilingComponent>>>> =
            self.components.borrow().iter().map(|e| Rc::clone(&e.comp)).collect();
        for cell in snapshot {
            if let Ok(mut comp) = cell.try_borrow_mut() {
                comp.absorb(vm);
            }
        }
    }

    /// Union of procedures any component has data for, sorted.
    pub fn known_procs(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for entry in self.components.borrow().iter() {
            if let Ok(comp) = entry.comp.try_borrow() {
                set.extend(comp.known_procs());
            }
        }
        set.into_iter().collect()
    }

    pub fn dump(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for entry in self.components.borrow().iter() {
            if let Ok(comp) = entry.comp.try_borrow() {
                lines.extend(comp.dump(&self.params));
            }
        }
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Probe {
        name: String,
        seen: Rc<RefCell<Vec<String>>>,
        similarity: Option<f64>,
    }

    impl ProfilingComponent for Probe {
        fn name(&self) -> &str {
            &self.name
        }
        fn handle(&mut self, _sys: &ProfilingSystem, msg: &mut ProfileMessage) {
            self.seen.borrow_mut().push(format!("{}:{:?}", self.name, msg.body));
            if let MessageBody::Similarity { .. } = &msg.body {
                if let Some(s) = self.similarity {
                    msg.note_similarity(s);
                }
            }
        }
    }

    #[test]
    fn broadcast_in_registration_order() {
        let seen = Rc::new(RefCell::new(Vec::new()));
        let sys = ProfilingSystem::new(SimilarityParams::default());
        for name in ["one", "two", "three"] {
            sys.register_component(Box::new(Probe {
                name: name.into(),
                seen: Rc::clone(&seen),
                similarity: None,
            }))
            .unwrap();
        }
        sys.age();
        let order: Vec<String> =
            seen.borrow().iter().map(|s| s.split(':').next().unwrap().to_string()).collect();
        assert_eq!(order, ["one", "two", "three"]);
    }

    #[test]
    fn duplicate_name_rejected_and_deregistration_works() {
        let seen = Rc::new(RefCell::new(Vec::new()));
        let sys = ProfilingSystem::new(SimilarityParams::default());
        let mk = || {
            Box::new(Probe { name: "p".into(), seen: Rc::clone(&seen), similarity: None })
        };
        let id = sys.register_component(mk()).unwrap();
        assert!(matches!(
            sys.register_component(mk()),
            Err(ProfilingError::DuplicateName(_))
        ));
        assert!(sys.deregister(id));
        assert!(sys.register_component(mk()).is_ok());
    }

    #[test]
    fn unhandled_message_stays_unhandled() {
        let sys = ProfilingSystem::new(SimilarityParams::default());
        let mut msg = ProfileMessage::measure(
            MeasureKind::MissCnt,
            RequestCode::Query,
            Target::None,
        );
        sys.broadcast(&mut msg);
        assert!(!msg.handled);
        assert_eq!(msg.reply, None);
    }

    #[test]
    fn stable_proc_takes_minimum_across_handlers() {
        let seen = Rc::new(RefCell::new(Vec::new()));
        let sys = ProfilingSystem::new(SimilarityParams::default());
        sys.register_component(Box::new(Probe {
            name: "exact".into(),
            seen: Rc::clone(&seen),
            similarity: Some(1.0),
        }))
        .unwrap();
        sys.register_component(Box::new(Probe {
            name: "jittery".into(),
            seen: Rc::clone(&seen),
            similarity: Some(0.90),
        }))
        .unwrap();
        assert!(!sys.stable_proc("f"));
        assert_eq!(sys.similarity_of("f"), Some(0.90));
    }

    #[test]
    fn unknown_procedure_is_vacuously_stable() {
        let sys = ProfilingSystem::new(SimilarityParams::default());
        assert!(sys.stable_proc("ghost"));
    }

    #[test]
    fn decay_rounds_half_away_and_floors_below_one() {
        assert_eq!(decay(100), 50);
        assert_eq!(decay(50), 25);
        assert_eq!(decay(3), 2);
        assert_eq!(decay(2), 1);
        assert_eq!(decay(1), 0);
        assert_eq!(decay(0), 0);
    }

    #[test]
    fn epoch_age_snapshots_exactly() {
        let mut h = EpochHistory::with_len(3);
        h.add(0, 100);
        h.add(1, 7);
        h.age();
        assert_eq!(h.previous, vec![100, 7, 0]);
        assert_eq!(h.current, vec![50, 4, 0]);
    }
}
