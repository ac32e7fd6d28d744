//! Shipped profiling components: the instrumenting path profiler, the
//! sampling hotness profiler, and the block profiler derived from path
//! counts by re-broadcast.

use std::collections::BTreeMap;

use crate::similarity::SimilarityParams;
use crate::vm::Vm;

use super::paths::paths_through;
use super::{
    EpochHistory, MeasureKind, MessageBody, ProfileMessage, ProfilingComponent,
    ProfilingSystem, RequestCode, SharedRegistry, Target,
};

// ---------------------------------------------------------------------------
// Path profiler
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct PathEpochs {
    paths: EpochHistory,
    edges: EpochHistory,
    last_seen_paths: Vec<u64>,
    last_seen_edges: Vec<u64>,
    last_s: Option<f64>,
}

/// Exact path counts via inserted instrumentation. Registering interest arms
/// the shared registry; the optimizer's instrumentation phase does the
/// actual insertion. Back edges get dedicated plain counters.
pub struct PathProfiler {
    registry: SharedRegistry,
    epochs: BTreeMap<String, PathEpochs>,
}

impl PathProfiler {
    pub fn new(registry: SharedRegistry) -> Self {
        PathProfiler { registry, epochs: BTreeMap::new() }
    }

    fn combined(&self, proc: &str) -> Option<(Vec<u64>, Vec<u64>)> {
        let e = self.epochs.get(proc)?;
        let mut cur = e.paths.current.clone();
        cur.extend_from_slice(&e.edges.current);
        let mut prev = e.paths.previous.clone();
        prev.extend_from_slice(&e.edges.previous);
        Some((prev, cur))
    }
}

impl ProfilingComponent for PathProfiler {
    fn name(&self) -> &str {
        "path"
    }

    fn handle(&mut self, _sys: &ProfilingSystem, msg: &mut ProfileMessage) {
        match &msg.body {
            MessageBody::Age => {
                for e in self.epochs.values_mut() {
                    e.paths.age();
                    e.edges.age();
                }
                msg.handled = true;
            }
            MessageBody::Similarity { proc } => {
                if let Some((prev, cur)) = self.combined(proc) {
                    use crate::similarity::{similarity, ProfileVector};
                    let s = similarity(
                        &ProfileVector::from_counts(&prev),
                        &ProfileVector::from_counts(&cur),
                        &_sys.params,
                    );
                    self.epochs.get_mut(proc).unwrap().last_s = Some(s);
                    msg.note_similarity(s);
                }
            }
            MessageBody::Measure { kind, code, target }
                if matches!(kind, MeasureKind::PathCnt | MeasureKind::EdgeCnt) =>
            {
                let Some(proc) = target.proc().map(str::to_string) else { return };
                match code {
                    RequestCode::Register => {
                        self.registry.borrow_mut().register_interest(&proc);
                        self.epochs.entry(proc).or_default();
                        msg.handled = true;
                    }
                    RequestCode::Release => {
                        self.registry.borrow_mut().release_interest(&proc);
                        self.epochs.remove(&proc);
                        msg.handled = true;
                    }
                    RequestCode::Query => {
                        if msg.handled {
                            return;
                        }
                        let value = match target {
                            Target::Path { id, .. } => self
                                .epochs
                                .get(&proc)
                                .and_then(|e| e.paths.current.get(*id as usize))
                                .copied()
                                .unwrap_or(0),
                            Target::Edge { from, to, .. } => {
                                let reg = self.registry.borrow();
                                let idx = reg.plan(&proc).and_then(|armed| {
                                    armed
                                        .plan
                                        .back_edges
                                        .iter()
                                        .position(|(f, t)| f == from && t == to)
                                });
                                match idx {
                                    Some(i) => self
                                        .epochs
                                        .get(&proc)
                                        .and_then(|e| e.edges.current.get(i))
                                        .copied()
                                        .unwrap_or(0),
                                    // Readability does not require
                                    // registration: unknown targets read 0.
                                    None => 0,
                                }
                            }
                            _ => 0,
                        };
                        msg.handled = true;
                        msg.reply = Some(value as f64);
                    }
                }
            }
            _ => {}
        }
    }

    fn absorb(&mut self, vm: &mut Vm) {
        let registry = self.registry.clone();
        let reg = registry.borrow();
        for proc in reg.armed_procs() {
            let armed = reg.plan(&proc).unwrap();
            if !armed.active {
                continue;
            }
            let e = self.epochs.entry(proc.clone()).or_default();
            e.last_seen_paths.resize(armed.plan.num_paths as usize, 0);
            for i in 0..armed.plan.num_paths as usize {
                let now = vm.counter(armed.path_base + i as u32);
                let delta = now - e.last_seen_paths[i];
                if delta > 0 {
                    e.paths.add(i, delta);
                }
                e.last_seen_paths[i] = now;
            }
            e.last_seen_edges.resize(armed.back_edge_counters.len(), 0);
            for (i, &cid) in armed.back_edge_counters.iter().enumerate() {
                let now = vm.counter(cid);
                let delta = now - e.last_seen_edges[i];
                if delta > 0 {
                    e.edges.add(i, delta);
                }
                e.last_seen_edges[i] = now;
            }
        }
    }

    fn known_procs(&self) -> Vec<String> {
        self.epochs.keys().cloned().collect()
    }

    fn dump(&self, _params: &SimilarityParams) -> Vec<String> {
        let mut lines = Vec::new();
        for (proc, e) in &self.epochs {
            let fmt = |v: &[u64]| {
                v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            };
            let s = e.last_s.map(|s| format!("{s:.6}")).unwrap_or_else(|| "-".into());
            lines.push(format!(
                "profile component=path proc={proc} current={} previous={} edges={} s={s}",
                fmt(&e.paths.current),
                fmt(&e.paths.previous),
                fmt(&e.edges.current),
            ));
        }
        lines
    }
}

// ---------------------------------------------------------------------------
// Sampling hotness profiler
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct HotnessEpochs {
    block_index: BTreeMap<String, usize>,
    history: EpochHistory,
    last_s: Option<f64>,
}

/// Statistical hotness from the VM's periodic samples: per procedure, a
/// vector of per-block sample counts. Hotness share = this procedure's
/// current-epoch samples over all current-epoch samples.
pub struct SamplingProfiler {
    epochs: BTreeMap<String, HotnessEpochs>,
}

impl SamplingProfiler {
    pub fn new() -> Self {
        SamplingProfiler { epochs: BTreeMap::new() }
    }

    pub fn hotness(&self, proc: &str) -> f64 {
        let total: u64 =
            self.epochs.values().map(|e| e.history.current.iter().sum::<u64>()).sum();
        if total == 0 {
            return 0.0;
        }
        let own: u64 = self
            .epochs
            .get(proc)
            .map(|e| e.history.current.iter().sum())
            .unwrap_or(0);
        own as f64 / total as f64
    }
}

impl Default for SamplingProfiler {
    fn default() -> Self {
        Self::new()
    }
}

impl ProfilingComponent for SamplingProfiler {
    fn name(&self) -> &str {
        "sampling"
    }

    fn handle(&mut self, sys: &ProfilingSystem, msg: &mut ProfileMessage) {
        match &msg.body {
            MessageBody::Age => {
                for e in self.epochs.values_mut() {
                    e.history.age();
                }
                msg.handled = true;
            }
            MessageBody::Similarity { proc } => {
                if let Some(e) = self.epochs.get_mut(proc) {
                    let s = e.history.similarity(&sys.params);
                    e.last_s = Some(s);
                    msg.note_similarity(s);
                }
            }
            MessageBody::Measure { kind: MeasureKind::ProcHotness, code, target } => {
                let Some(proc) = target.proc().map(str::to_string) else { return };
                match code {
                    RequestCode::Register => {
                        self.epochs.entry(proc).or_default();
                        msg.handled = true;
                    }
                    RequestCode::Release => {
                        self.epochs.remove(&proc);
                        msg.handled = true;
                    }
                    RequestCode::Query => {
                        if msg.handled {
                            return;
                        }
                        msg.handled = true;
                        msg.reply = Some(self.hotness(&proc));
                    }
                }
            }
            _ => {}
        }
    }

    fn absorb(&mut self, vm: &mut Vm) {
        for sample in vm.take_samples() {
            let e = self.epochs.entry(sample.proc.clone()).or_default();
            let next = e.block_index.len();
            let idx = *e.block_index.entry(sample.block).or_insert(next);
            e.history.add(idx, 1);
        }
    }

    fn known_procs(&self) -> Vec<String> {
        self.epochs.keys().cloned().collect()
    }

    fn dump(&self, _params: &SimilarityParams) -> Vec<String> {
        let mut lines = Vec::new();
        for (proc, e) in &self.epochs {
            let fmt = |v: &[u64]| {
                v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            };
            let s = e.last_s.map(|s| format!("{s:.6}")).unwrap_or_else(|| "-".into());
            lines.push(format!(
                "profile component=sampling proc={proc} current={} previous={} s={s}",
                fmt(&e.history.current),
                fmt(&e.history.previous),
            ));
        }
        lines
    }
}

// ---------------------------------------------------------------------------
// Derived block profiler
// ---------------------------------------------------------------------------

/// Block execution counts composed over the path profiler: a BlockCnt query
/// re-broadcasts one PathCnt query per path crossing the block and sums the
/// replies. Holds no counters of its own.
pub struct BlockProfiler {
    registry: SharedRegistry,
}

impl BlockProfiler {
    pub fn new(registry: SharedRegistry) -> Self {
        BlockProfiler { registry }
    }
}

impl ProfilingComponent for BlockProfiler {
    fn name(&self) -> &str {
        "block"
    }

    fn handle(&mut self, sys: &ProfilingSystem, msg: &mut ProfileMessage) {
        let MessageBody::Measure { kind: MeasureKind::BlockCnt, code, target } = &msg.body
        else {
            return;
        };
        let Target::Block { proc, label } = target else { return };
        match code {
            // Interest in block counts is interest in the underlying paths.
            RequestCode::Register | RequestCode::Release => {
                let mut fwd = ProfileMessage::measure(
                    MeasureKind::PathCnt,
                    *code,
                    Target::Proc { proc: proc.clone() },
                );
                sys.broadcast(&mut fwd);
                msg.handled = fwd.handled;
            }
            RequestCode::Query => {
                if msg.handled {
                    return;
                }
                let ids = {
                    let reg = self.registry.borrow();
                    match reg.plan(proc) {
                        Some(armed) => paths_through(&armed.plan, label),
                        None => Vec::new(),
                    }
                };
                let mut sum = 0.0;
                for id in ids {
                    let mut q = ProfileMessage::measure(
                        MeasureKind::PathCnt,
                        RequestCode::Query,
                        Target::Path { proc: proc.clone(), id },
                    );
                    sys.broadcast(&mut q);
                    sum += q.reply.unwrap_or(0.0);
                }
                msg.handled = true;
                msg.reply = Some(sum);
            }
        }
    }
}
