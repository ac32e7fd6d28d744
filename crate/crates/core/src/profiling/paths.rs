//! Acyclic path enumeration and the edge-increment plan that makes a
//! running procedure compute its own path ids.
//!
//! Back edges are removed first; the remaining DAG's entry-to-exit paths are
//! numbered compactly by assigning each edge a weight such that the sum of
//! weights along a path is its id (the classic compact numbering). The plan
//! also names every removed back edge so each can get a dedicated counter,
//! and marks where the accumulated path register must be committed or reset.

use std::collections::HashSet;

use crate::ir::ProcedureIR;
use crate::transport::{Label, Terminator};

/// Maximum number of enumerated paths per procedure; beyond this the
/// profiler declines to instrument.
pub const PATH_CAP: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPlan {
    pub proc: String,
    pub num_paths: u32,
    /// Path id -> block-label sequence, in id order.
    pub paths: Vec<Vec<Label>>,
    /// DAG edges `(from, to, weight)` with nonzero weight; executing the
    /// edge adds `weight` to the path register.
    pub increments: Vec<(Label, Label, u64)>,
    /// Back edges `(from, to)` removed before enumeration; each gets its own
    /// plain counter, and taking one resets the path register.
    pub back_edges: Vec<(Label, Label)>,
    /// Blocks that terminate with `ret`; the path register is committed
    /// there.
    pub exit_blocks: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("path count {0} exceeds cap {PATH_CAP}")]
    CapExceeded(u64),
}

pub fn enumerate_paths(ir: &ProcedureIR) -> Result<PathPlan, PathError> {
    let cfg = ir.cfg();
    let n = ir.blocks.len();
    let back: HashSet<(usize, usize)> = cfg.back_edges().into_iter().collect();

    // DAG successors in terminator order, back edges removed.
    let dag_succs: Vec<Vec<usize>> = (0..n)
        .map(|v| cfg.succs[v].iter().copied().filter(|&w| !back.contains(&(v, w))).collect())
        .collect();

    // Count paths bottom-up in a topological order of the DAG.
    let topo = topo_order(&dag_succs);
    let mut num_paths = vec![0u64; n];
    for &v in topo.iter().rev() {
        num_paths[v] = if dag_succs[v].is_empty() {
            1
        } else {
            dag_succs[v].iter().map(|&w| num_paths[w]).sum()
        };
        if num_paths[v] > PATH_CAP {
            return Err(PathError::CapExceeded(num_paths[v]));
        }
    }
    let total = num_paths[0];

    // Edge weights: weight(v -> w_i) = sum of num_paths(w_j) for j < i.
    let mut increments = Vec::new();
    let mut weight = vec![Vec::new(); n];
    for v in 0..n {
        let mut acc = 0u64;
        for &w in &dag_succs[v] {
            weight[v].push(acc);
            if acc > 0 {
                increments.push((ir.blocks[v].label.clone(), ir.blocks[w].label.clone(), acc));
            }
            acc += num_paths[w];
        }
    }

    // Enumerate the actual sequences; choosing successors in order yields
    // ids 0, 1, 2, ... exactly.
    let mut paths = Vec::with_capacity(total as usize);
    let mut cur = Vec::new();
    walk(0, &dag_succs, ir, &mut cur, &mut paths);
    debug_assert_eq!(paths.len() as u64, total);

    let back_edges = back
        .iter()
        .map(|&(u, v)| (ir.blocks[u].label.clone(), ir.blocks[v].label.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let exit_blocks = ir
        .blocks
        .iter()
        .filter(|b| matches!(b.term, Terminator::Ret(_)))
        .map(|b| b.label.clone())
        .collect();

    Ok(PathPlan {
        proc: ir.name.clone(),
        num_paths: total as u32,
        paths,
        increments,
        back_edges,
        exit_blocks,
    })
}

/// Path id for a given block sequence under the plan's numbering, if the
/// sequence is one of the enumerated paths.
pub fn path_id(plan: &PathPlan, sequence: &[Label]) -> Option<u32> {
    plan.paths.iter().position(|p| p == sequence).map(|i| i as u32)
}

fn topo_order(succs: &[Vec<usize>]) -> Vec<usize> {
    let n = succs.len();
    let mut indegree = vec![0usize; n];
    for v in 0..n {
        for &w in &succs[v] {
            indegree[w] += 1;
        }
    }
    // Deterministic: lowest-index ready node first.
    let mut order = Vec::with_capacity(n);
    let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    ready.sort_unstable_by(|a, b| b.cmp(a));
    while let Some(v) = ready.pop() {
        order.push(v);
        for &w in &succs[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(w);
            }
        }
        ready.sort_unstable_by(|a, b| b.cmp(a));
    }
    order
}

fn walk(
    v: usize,
    succs: &[Vec<usize>],
    ir: &ProcedureIR,
    cur: &mut Vec<Label>,
    out: &mut Vec<Vec<Label>>,
) {
    cur.push(ir.blocks[v].label.clone());
    if succs[v].is_empty() {
        out.push(cur.clone());
    } else {
        for &w in &succs[v] {
            walk(w, succs, ir, cur, out);
        }
    }
    cur.pop();
}

/// Which enumerated paths pass through `block`.
pub fn paths_through<'a>(plan: &'a PathPlan, block: &str) -> Vec<u32> {
    plan.paths
        .iter()
        .enumerate()
        .filter(|(_, p)| p.iter().any(|l| l == block))
        .map(|(i, _)| i as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build_ssa;
    use crate::transport::parse_transport;

    fn ir_of(text: &str, name: &str) -> ProcedureIR {
        let m = parse_transport(text).unwrap();
        build_ssa(m.procedure(name).unwrap()).unwrap()
    }

    #[test]
    fn straight_line_is_one_path() {
        let ir = ir_of(
            "module m\nproc f nparams 0 entry\nblock b0\n  v = const 1\n  ret v\n",
            "f",
        );
        let plan = enumerate_paths(&ir).unwrap();
        assert_eq!(plan.num_paths, 1);
        assert!(plan.increments.is_empty());
        assert_eq!(plan.paths, vec![vec!["b0".to_string()]]);
    }

    #[test]
    fn diamond_has_two_paths_one_increment() {
        let ir = ir_of(
            "module m\nproc f nparams 1 entry\n\
             block b0\n  z = const 0\n  c = cmp_lt p0 z\n  br_if c l r\n\
             block l\n  a = const 1\n  br j\n\
             block r\n  b = const 2\n  br j\n\
             block j\n  v = const 3\n  ret v\n",
            "f",
        );
        let plan = enumerate_paths(&ir).unwrap();
        assert_eq!(plan.num_paths, 2);
        assert_eq!(plan.increments.len(), 1);
        assert_eq!(plan.increments[0].2, 1);
    }

    #[test]
    fn double_diamond_numbers_paths_zero_to_three() {
        let ir = ir_of(
            "module m\nproc f nparams 2 entry\n\
             block b0\n  z = const 0\n  c = cmp_lt p0 z\n  br_if c l1 r1\n\
             block l1\n  br m1\n\
             block r1\n  br m1\n\
             block m1\n  d = cmp_lt p1 z\n  br_if d l2 r2\n\
             block l2\n  br x\n\
             block r2\n  br x\n\
             block x\n  v = const 0\n  ret v\n",
            "f",
        );
        let plan = enumerate_paths(&ir).unwrap();
        assert_eq!(plan.num_paths, 4);

        // Oracle: exhaustively follow every branch combination, summing the
        // planned edge increments, and check the sum equals the id of the
        // enumerated sequence.
        for (want_l1, want_l2) in
            [(true, true), (true, false), (false, true), (false, false)]
        {
            let mut seq = vec!["b0".to_string()];
            seq.push(if want_l1 { "l1" } else { "r1" }.to_string());
            seq.push("m1".to_string());
            seq.push(if want_l2 { "l2" } else { "r2" }.to_string());
            seq.push("x".to_string());
            let mut register = 0u64;
            for pair in seq.windows(2) {
                for (f, t, w) in &plan.increments {
                    if *f == pair[0] && *t == pair[1] {
                        register += w;
                    }
                }
            }
            let id = path_id(&plan, &seq).expect("sequence enumerated");
            assert_eq!(register, id as u64, "sequence {seq:?}");
        }
    }

    #[test]
    fn loop_back_edge_is_excluded_and_named() {
        let ir = ir_of(
            "module m\nproc f nparams 1 entry\n\
             block b0\n  i = const 0\n  br head\n\
             block head\n  c = cmp_lt i p0\n  br_if c body exit\n\
             block body\n  one = const 1\n  i2 = add i one\n  br head\n\
             block exit\n  ret i\n",
            "f",
        );
        let plan = enumerate_paths(&ir).unwrap();
        assert_eq!(plan.back_edges, vec![("body".to_string(), "head".to_string())]);
        // DAG paths: b0-head-body (truncated) and b0-head-exit.
        assert_eq!(plan.num_paths, 2);
    }

    #[test]
    fn wide_switch_ladder_exceeds_cap() {
        // 13 sequential diamonds -> 2^13 = 8192 paths > 4096.
        let mut text = String::from("module m\nproc f nparams 1 entry\n");
        let k = 13;
        for i in 0..k {
            text.push_str(&format!(
                "block h{i}\n  z{i} = const 0\n  c{i} = cmp_lt p0 z{i}\n  br_if c{i} a{i} b{i}\n\
                 block a{i}\n  br j{i}\n\
                 block b{i}\n  br j{i}\n"
            ));
            if i + 1 < k {
                text.push_str(&format!("block j{i}\n  br h{}\n", i + 1));
            } else {
                text.push_str(&format!("block j{i}\n  v = const 0\n  ret v\n"));
            }
        }
        let ir = ir_of(&text, "f");
        assert!(matches!(enumerate_paths(&ir), Err(PathError::CapExceeded(_))));
    }

    #[test]
    fn block_membership_query() {
        let ir = ir_of(
            "module m\nproc f nparams 1 entry\n\
             block b0\n  z = const 0\n  c = cmp_lt p0 z\n  br_if c l r\n\
             block l\n  br j\n\
             block r\n  br j\n\
             block j\n  v = const 3\n  ret v\n",
            "f",
        );
        let plan = enumerate_paths(&ir).unwrap();
        assert_eq!(paths_through(&plan, "j").len(), 2);
        assert_eq!(paths_through(&plan, "l").len(), 1);
        assert_eq!(paths_through(&plan, "nope").len(), 0);
    }
}
