//! Shared corpus for equivalence testing: hand-written procedures plus a
//! seeded generator of structured (always-terminating) random procedures.
//!
//! Not every integration test uses every helper.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adaptvm_core::transport::{parse_transport, TransportModule};

/// A procedure worth checking: its module, the procedure name, and arity.
pub struct Case {
    pub module: TransportModule,
    pub proc: String,
    pub nparams: u32,
}

fn case(text: &str, proc: &str, nparams: u32) -> Case {
    Case {
        module: parse_transport(text).expect("corpus module parses"),
        proc: proc.to_string(),
        nparams,
    }
}

pub fn hand_corpus() -> Vec<Case> {
    let mut out = Vec::new();
    out.push(case(
        "module straight\nproc f nparams 2\nblock b0\n  a = add p0 p1\n  b = mul a a\n  c = sub b p0\n  ret c\n",
        "f",
        2,
    ));
    out.push(case(
        "module folded\nproc f nparams 1\nblock b0\n  a = const 6\n  b = const 7\n  c = mul a b\n  d = add c p0\n  ret d\n",
        "f",
        1,
    ));
    out.push(case(
        "module diamond\nproc f nparams 2\n\
         block b0\n  z = const 0\n  c = cmp_lt p0 z\n  br_if c neg pos\n\
         block neg\n  r = sub z p0\n  br join\n\
         block pos\n  r = add p0 p1\n  br join\n\
         block join\n  s = mul r r\n  ret s\n",
        "f",
        2,
    ));
    out.push(case(
        "module loopsum\nproc f nparams 1\n\
         block b0\n  i = const 0\n  acc = const 0\n  ten = const 10\n  br head\n\
         block head\n  c = cmp_lt i ten\n  br_if c body exit\n\
         block body\n  acc = add acc p0\n  one = const 1\n  i = add i one\n  br head\n\
         block exit\n  ret acc\n",
        "f",
        1,
    ));
    out.push(case(
        "module calls\n\
         proc sq nparams 1\nblock b0\n  r = mul p0 p0\n  ret r\n\
         proc f nparams 2\nblock b0\n  a = call sq (p0)\n  b = call sq (p1)\n  c = add a b\n  ret c\n",
        "f",
        2,
    ));
    out.push(case(
        "module recur\n\
         proc fact nparams 1\n\
         block b0\n  two = const 2\n  c = cmp_lt p0 two\n  br_if c base step\n\
         block base\n  one = const 1\n  ret one\n\
         block step\n  one = const 1\n  m = sub p0 one\n  r = call fact (m)\n  v = mul p0 r\n  ret v\n\
         proc f nparams 1\n\
         block b0\n  z = const 0\n  six = const 6\n  c = cmp_lt p0 z\n  br_if c neg pos\n\
         block neg\n  ret z\n\
         block pos\n  n = cmp_lt p0 six\n  br_if n small big\n\
         block small\n  r = call fact (p0)\n  ret r\n\
         block big\n  r = call fact (six)\n  s = add r p0\n  ret s\n",
        "f",
        1,
    ));
    out.push(case(
        "module indirect\n\
         global g = &twice\n\
         proc twice nparams 1\nblock b0\n  r = add p0 p0\n  ret r\n\
         proc f nparams 1\nblock b0\n  t = load_global g\n  r = call_indirect t (p0)\n  one = const 1\n  s = add r one\n  ret s\n",
        "f",
        1,
    ));
    out.push(case(
        "module heap\n\
         proc f nparams 2\n\
         block b0\n  o = new_obj 2\n  store_field o 0 p0\n  store_field o 1 p1\n  a = load_field o 0\n  b = load_field o 1\n  r = mul a b\n  ret r\n",
        "f",
        2,
    ));
    out.push(case(
        "module divsafe\nproc f nparams 1\nblock b0\n  seven = const 7\n  q = div p0 seven\n  r = mul q q\n  ret r\n",
        "f",
        1,
    ));
    out.push(case(
        "module cmps\nproc f nparams 2\n\
         block b0\n  a = cmp_lt p0 p1\n  b = cmp_eq p0 p1\n  c = add a b\n  d = cmp_lt b a\n  e = add c d\n  ret e\n",
        "f",
        2,
    ));
    out
}

/// Deterministic structured-program generator. Programs always terminate:
/// branches come from diamonds and every loop counts up to a small constant.
pub struct Gen {
    rng: ChaCha8Rng,
    lines: Vec<String>,
    next_val: usize,
    next_blk: usize,
    pool: Vec<String>,
    // Names assigned on both arms of a diamond. They get a dead `const 0`
    // initializer in the entry block so every phi the SSA builder inserts
    // for them has a definition on every path.
    merged_names: Vec<String>,
}

impl Gen {
    fn fresh_val(&mut self) -> String {
        let v = format!("v{}", self.next_val);
        self.next_val += 1;
        v
    }

    fn fresh_blk(&mut self, tag: &str) -> String {
        let b = format!("{tag}{}", self.next_blk);
        self.next_blk += 1;
        b
    }

    fn pick(&mut self) -> String {
        let i = self.rng.gen_range(0..self.pool.len());
        self.pool[i].clone()
    }

    fn emit_const(&mut self) -> String {
        let v = self.fresh_val();
        let n: i64 = self.rng.gen_range(-9..10);
        self.lines.push(format!("  {v} = const {n}"));
        v
    }

    /// One arithmetic op over the pool; division only by a nonzero constant.
    fn emit_op(&mut self, dest: Option<String>) -> String {
        let a = self.pick();
        let b = self.pick();
        let v = dest.unwrap_or_else(|| self.fresh_val());
        let line = match self.rng.gen_range(0..6) {
            0 => format!("  {v} = add {a} {b}"),
            1 => format!("  {v} = sub {a} {b}"),
            2 => format!("  {v} = mul {a} {b}"),
            3 => format!("  {v} = cmp_lt {a} {b}"),
            4 => format!("  {v} = cmp_eq {a} {b}"),
            _ => {
                let d: i64 = *[2, 3, 5, 7].get(self.rng.gen_range(0..4)).unwrap();
                let c = self.fresh_val();
                self.lines.push(format!("  {c} = const {d}"));
                format!("  {v} = div {a} {c}")
            }
        };
        self.lines.push(line);
        v
    }

    fn straight(&mut self) {
        for _ in 0..self.rng.gen_range(1..4) {
            let v = self.emit_op(None);
            self.pool.push(v);
        }
    }

    /// Two-armed branch assigning the same name in both arms; the merged
    /// value joins the pool (the SSA builder inserts the phi).
    fn diamond(&mut self, depth: u32) {
        let c = self.pick();
        let d = self.pick();
        let cond = self.fresh_val();
        let then_b = self.fresh_blk("t");
        let else_b = self.fresh_blk("e");
        let join_b = self.fresh_blk("j");
        let merged = self.fresh_val();
        self.merged_names.push(merged.clone());
        self.lines.push(format!("  {cond} = cmp_lt {c} {d}"));
        self.lines.push(format!("  br_if {cond} {then_b} {else_b}"));
        let scope = self.pool.len();
        for arm in [&then_b, &else_b] {
            self.lines.push(format!("block {arm}"));
            if depth > 0 && self.rng.gen_bool(0.3) {
                self.diamond(depth - 1);
            } else {
                self.straight();
            }
            self.emit_op(Some(merged.clone()));
            self.lines.push(format!("  br {join_b}"));
            // Arm-local values are not defined on the other path.
            self.pool.truncate(scope);
        }
        self.lines.push(format!("block {join_b}"));
        self.pool.push(merged);
    }

    /// Counted loop accumulating into a reassigned variable.
    fn counted_loop(&mut self) {
        let bound: i64 = self.rng.gen_range(2..8);
        let step = self.pick();
        let i = self.fresh_val();
        let acc = self.fresh_val();
        let lim = self.fresh_val();
        let one = self.fresh_val();
        let cond = self.fresh_val();
        let head = self.fresh_blk("h");
        let body = self.fresh_blk("l");
        let exit = self.fresh_blk("x");
        self.lines.push(format!("  {i} = const 0"));
        self.lines.push(format!("  {acc} = const 0"));
        self.lines.push(format!("  {lim} = const {bound}"));
        self.lines.push(format!("  br {head}"));
        self.lines.push(format!("block {head}"));
        self.lines.push(format!("  {cond} = cmp_lt {i} {lim}"));
        self.lines.push(format!("  br_if {cond} {body} {exit}"));
        self.lines.push(format!("block {body}"));
        self.lines.push(format!("  {acc} = add {acc} {step}"));
        self.lines.push(format!("  {one} = const 1"));
        self.lines.push(format!("  {i} = add {i} {one}"));
        self.lines.push(format!("  br {head}"));
        self.lines.push(format!("block {exit}"));
        self.pool.push(acc);
    }
}

pub fn fuzz_case(seed: u64) -> Case {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        lines: Vec::new(),
        next_val: 0,
        next_blk: 0,
        pool: Vec::new(),
        merged_names: Vec::new(),
    };
    let nparams = g.rng.gen_range(1..=3u32);
    for p in 0..nparams {
        g.pool.push(format!("p{p}"));
    }
    g.lines.push("block b0".into());
    let c = g.emit_const();
    g.pool.push(c);
    for _ in 0..g.rng.gen_range(2..6) {
        match g.rng.gen_range(0..4) {
            0 | 1 => g.straight(),
            2 => g.diamond(1),
            _ => g.counted_loop(),
        }
    }
    let ret = g.pick();
    g.lines.push(format!("  ret {ret}"));
    for (i, name) in g.merged_names.iter().enumerate() {
        g.lines.insert(1 + i, format!("  {name} = const 0"));
    }
    let text = format!(
        "module fuzz{seed}\nproc f nparams {nparams}\n{}\n",
        g.lines.join("\n")
    );
    case(&text, "f", nparams)
}

pub fn fuzz_corpus(base_seed: u64, count: usize) -> Vec<Case> {
    (0..count as u64).map(|i| fuzz_case(base_seed + i)).collect()
}

/// Deterministic argument sets for a given arity.
pub fn random_inputs(seed: u64, nparams: u32, count: usize) -> Vec<Vec<i64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..nparams).map(|_| rng.gen_range(-1000..1000)).collect())
        .collect()
}
