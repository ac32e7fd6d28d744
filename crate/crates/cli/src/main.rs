//! Command-line harness: runs workloads under the adaptive runtime, offline
//! similarity evaluation, and report pretty-printing.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use adaptvm_core::manager::{ManagerConfig, RunReport, System};
use adaptvm_core::optimizer::phases::phases_by_name;
use adaptvm_core::profiling::components::{BlockProfiler, PathProfiler, SamplingProfiler};
use adaptvm_core::similarity::{
    alpha, beta, is_stable, pad, should_reoptimize, similarity, ProfileVector, SimilarityParams,
};
use adaptvm_core::{parse_transport, TransportModule, Value};

#[derive(Parser)]
#[command(name = "adaptvm", about = "Adaptive-optimization runtime", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload module under the adaptive runtime.
    Run(RunArgs),
    /// Evaluate the similarity measure over a file of paired vectors.
    Sim(SimArgs),
    /// Render a run report as a human-readable summary.
    Explain { report: PathBuf },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    /// Deterministic: manager ticks interleave with execution at safe points.
    SingleTask,
    /// Same driver; determinism of traces is only promised in single-task.
    Background,
}

#[derive(Parser)]
struct RunArgs {
    /// Workload module (.tm transport form).
    workload: PathBuf,
    /// Declarative config file (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated phase list, or `none`.
    #[arg(long)]
    phases: Option<String>,
    /// Comma-separated profiler list (path,sampling,block), or `none`.
    #[arg(long)]
    profilers: Option<String>,
    /// Similarity damping constant c.
    #[arg(long)]
    c: Option<f64>,
    /// Similarity damping exponent k.
    #[arg(long)]
    k: Option<i32>,
    #[arg(long)]
    age_sleep: Option<u64>,
    #[arg(long)]
    sim_sleep: Option<u64>,
    /// Minimum estimate worth optimizing.
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Extension module to load mid-run, as PATH@TICK. Repeatable.
    #[arg(long = "load-extension")]
    load_extension: Vec<String>,
    /// Write the execution trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the run report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Post-run assertion like `swaps>=1` or `result==42`. Repeatable.
    #[arg(long = "assert")]
    asserts: Vec<String>,
    /// Integer argument for the entry procedure. Repeatable.
    #[arg(long = "arg")]
    args: Vec<i64>,
}

#[derive(Parser)]
struct SimArgs {
    /// File of vector pairs, one per line: `1 1 | 2 1`.
    vectors: PathBuf,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    k: Option<i32>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    phases: Option<String>,
    profilers: Option<String>,
    c: Option<f64>,
    k: Option<i32>,
    age_sleep: Option<u64>,
    sim_sleep: Option<u64>,
    gate: Option<f64>,
    seed: Option<u64>,
    mode: Option<String>,
    load_extension: Option<Vec<String>>,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
    args: Option<Vec<i64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sim(args) => cmd_sim(args),
        Cmd::Explain { report } => cmd_explain(&report),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(mut args: RunArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file: FileConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        merge_config(&mut args, file)?;
    }

    let mut config = ManagerConfig::default();
    if let Some(v) = args.age_sleep {
        config.age_sleep_time = v;
    }
    if let Some(v) = args.sim_sleep {
        config.similarity_sleep_time = v;
    }
    if let Some(v) = args.gate {
        config.estimate_gate = v;
    }
    if config.similarity_sleep_time > config.age_sleep_time {
        bail!("sim-sleep must not exceed age-sleep");
    }
    if !(config.estimate_gate > 0.0 && config.estimate_gate < 1.0) && args.gate.is_some() {
        bail!("gate must lie in (0, 1)");
    }
    let mut params = SimilarityParams::default();
    if let Some(v) = args.c {
        params.c = v;
    }
    if let Some(v) = args.k {
        params.k = v;
    }

    let mut sys = System::new(config, params);

    let profilers = list_arg(args.profilers.as_deref(), "path,sampling,block");
    for name in &profilers {
        match name.as_str() {
            "path" => sys
                .profiles
                .register_component(Box::new(PathProfiler::new(sys.registry.clone())))
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            "sampling" => sys
                .profiles
                .register_component(Box::new(SamplingProfiler::new()))
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            "block" => sys
                .profiles
                .register_component(Box::new(BlockProfiler::new(sys.registry.clone())))
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            other => bail!("unknown profiler `{other}`"),
        };
    }

    let phase_names = list_arg(args.phases.as_deref(), "instrument,constfold,cse,inline,devirtualize,dce");
    let refs: Vec<&str> = phase_names.iter().map(String::as_str).collect();
    for phase in phases_by_name(&refs, &sys.registry).map_err(|e| anyhow::anyhow!(e))? {
        sys.optimizer
            .register_phase(phase)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    // Path instrumentation is pointless without the phases/profilers for it.
    sys.config.instrument_all =
        phase_names.iter().any(|p| p == "instrument") && profilers.iter().any(|p| p == "path");

    let workload = read_module(&args.workload)?;
    sys.load(&workload).map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut extensions = Vec::new();
    for spec in &args.load_extension {
        let (path, tick) = spec
            .rsplit_once('@')
            .with_context(|| format!("extension spec `{spec}` is not PATH@TICK"))?;
        let tick: u64 = tick
            .parse()
            .with_context(|| format!("bad tick in `{spec}`"))?;
        extensions.push((read_module(&PathBuf::from(path))?, tick));
    }

    let mode = args.mode.unwrap_or(Mode::SingleTask);
    let seed = args.seed.unwrap_or(0);
    sys.vm.trace_event(&format!(
        "event=run workload={} seed={seed} mode={}",
        workload.name,
        if mode == Mode::SingleTask { "single-task" } else { "background" }
    ));

    let vm_args: Vec<Value> = args.args.iter().map(|&n| Value::Int(n)).collect();
    let report = sys
        .run(vm_args, extensions)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    if let Some(path) = &args.trace {
        let mut text = sys.vm.trace_lines().join("\n");
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let report_lines = report.to_lines();
    if let Some(path) = &args.report {
        let mut text = report_lines.join("\n");
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    match report.result {
        Some(Value::Int(n)) => println!("result: {n}"),
        _ => println!("result: none"),
    }
    println!(
        "clock: {}  optimizations: {}  swaps: {}  invalidations: {}",
        report.total_clock,
        report.optimizations,
        report.swaps.len(),
        report.invalidations
    );

    for expr in &args.asserts {
        check_assert(expr, &report)?;
    }
    Ok(())
}

fn merge_config(args: &mut RunArgs, file: FileConfig) -> Result<()> {
    args.phases = args.phases.take().or(file.phases);
    args.profilers = args.profilers.take().or(file.profilers);
    args.c = args.c.or(file.c);
    args.k = args.k.or(file.k);
    args.age_sleep = args.age_sleep.or(file.age_sleep);
    args.sim_sleep = args.sim_sleep.or(file.sim_sleep);
    args.gate = args.gate.or(file.gate);
    args.seed = args.seed.or(file.seed);
    if args.mode.is_none() {
        args.mode = match file.mode.as_deref() {
            None => None,
            Some("single-task") => Some(Mode::SingleTask),
            Some("background") => Some(Mode::Background),
            Some(other) => bail!("unknown mode `{other}` in config"),
        };
    }
    if args.load_extension.is_empty() {
        args.load_extension = file.load_extension.unwrap_or_default();
    }
    args.trace = args.trace.take().or(file.trace);
    args.report = args.report.take().or(file.report);
    if args.args.is_empty() {
        args.args = file.args.unwrap_or_default();
    }
    Ok(())
}

fn list_arg(value: Option<&str>, default: &str) -> Vec<String> {
    let raw = value.unwrap_or(default);
    if raw == "none" {
        return Vec::new();
    }
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn read_module(path: &PathBuf) -> Result<TransportModule> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_transport(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn check_assert(expr: &str, report: &RunReport) -> Result<()> {
    let ops = ["==", "!=", ">=", "<=", ">", "<"];
    let (key, op, rhs) = ops
        .iter()
        .find_map(|op| {
            expr.split_once(op)
                .map(|(k, v)| (k.trim(), *op, v.trim()))
        })
        .with_context(|| format!("cannot parse assertion `{expr}`"))?;
    let lhs: i64 = match key {
        "result" => match report.result {
            Some(Value::Int(n)) => n,
            _ => bail!("assertion `{expr}`: run produced no integer result"),
        },
        "swaps" => report.swaps.len() as i64,
        "optimizations" => report.optimizations as i64,
        "invalidations" => report.invalidations as i64,
        "total_clock" => report.total_clock as i64,
        other => bail!("unknown assertion key `{other}`"),
    };
    let rhs: i64 = rhs
        .parse()
        .with_context(|| format!("bad value in assertion `{expr}`"))?;
    let ok = match op {
        "==" => lhs == rhs,
        "!=" => lhs != rhs,
        ">=" => lhs >= rhs,
        "<=" => lhs <= rhs,
        ">" => lhs > rhs,
        "<" => lhs < rhs,
        _ => unreachable!(),
    };
    if !ok {
        bail!("assertion failed: {expr} (actual {key} = {lhs})");
    }
    Ok(())
}

fn cmd_sim(args: SimArgs) -> Result<()> {
    let mut params = SimilarityParams::default();
    if let Some(v) = args.c {
        params.c = v;
    }
    if let Some(v) = args.k {
        params.k = v;
    }
    let text = fs::read_to_string(&args.vectors)
        .with_context(|| format!("reading {}", args.vectors.display()))?;
    let mut index = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('|')
            .with_context(|| format!("line {}: expected `A | B`", lineno + 1))?;
        let a = parse_vector(a).with_context(|| format!("line {}", lineno + 1))?;
        let b = parse_vector(b).with_context(|| format!("line {}", lineno + 1))?;
        index += 1;
        let (pa, pb) = pad(&a, &b);
        let al = alpha(&pa, &pb);
        let be = beta(&pa, &pb);
        let s = similarity(&a, &b, &params);
        // With the default damping constants, S rounds to exactly 1.0 for
        // any small change, so "stable" is reserved for identical profiles.
        let verdict = if pa == pb && is_stable(s, &params) {
            "stable"
        } else if should_reoptimize(s, &params) {
            "reoptimize"
        } else {
            "no reoptimization"
        };
        println!("pair {index}");
        println!("  padded_prev = {}", fmt_vec(&pa));
        println!("  padded_cur  = {}", fmt_vec(&pb));
        println!("  alpha = {al:.9}");
        println!("  beta  = {be:.9}");
        println!("  s     = {s:.9}");
        println!("  verdict = {verdict}");
    }
    if index == 0 {
        bail!("no vector pairs in {}", args.vectors.display());
    }
    Ok(())
}

fn parse_vector(text: &str) -> Result<ProfileVector> {
    let mut out = Vec::new();
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if tok.is_empty() {
            continue;
        }
        out.push(tok.parse::<f64>().with_context(|| format!("bad number `{tok}`"))?);
    }
    if out.is_empty() {
        bail!("empty vector");
    }
    Ok(ProfileVector(out))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_explain(path: &PathBuf) -> Result<()> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut header = None;
    let mut swaps = Vec::new();
    let mut history = Vec::new();
    let mut stats = Vec::new();
    for line in text.lines() {
        let fields = parse_kv(line);
        if line.starts_with("report ") {
            header = Some(fields);
        } else if line.starts_with("swap ") {
            swaps.push(fields);
        } else if line.starts_with("history ") {
            history.push(fields);
        } else if line.starts_with("stats ") {
            stats.push(fields);
        }
    }
    let header = header.context("not a run report: missing `report` line")?;
    let get = |m: &Vec<(String, String)>, k: &str| -> String {
        m.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "?".into())
    };

    println!("run summary");
    println!(
        "  result {} after {} ticks; {} optimization(s), {} swap(s), {} invalidation(s)",
        get(&header, "result"),
        get(&header, "total_clock"),
        get(&header, "optimizations"),
        get(&header, "swaps"),
        get(&header, "invalidations")
    );
    if history.is_empty() && swaps.is_empty() {
        println!("  no optimizations performed");
        return Ok(());
    }
    let mut procs: Vec<String> = history
        .iter()
        .chain(&swaps)
        .map(|m| get(m, "proc"))
        .collect();
    procs.sort();
    procs.dedup();
    for proc in &procs {
        println!("procedure {proc}");
        for s in swaps.iter().filter(|m| get(m, "proc") == *proc) {
            println!(
                "  swapped {} -> {} (rewrote {} global, {} store, {} frame slot(s))",
                get(s, "old"),
                get(s, "new"),
                get(s, "globals"),
                get(s, "store"),
                get(s, "frames")
            );
        }
        for h in history.iter().filter(|m| get(m, "proc") == *proc) {
            let speedup = get(h, "speedup");
            let measured = if speedup == "-" {
                "unmeasured".to_string()
            } else {
                format!("measured speedup {speedup}")
            };
            println!(
                "  phase {} [{}] x{}, {}",
                get(h, "phase"),
                get(h, "status"),
                get(h, "applications"),
                measured
            );
        }
        for st in stats.iter().filter(|m| get(m, "proc") == *proc) {
            println!(
                "  {} invocation(s), self cost {}, inclusive {}",
                get(st, "invocations"),
                get(st, "self_cost"),
                get(st, "inclusive_cost")
            );
        }
    }
    let invalidations: i64 = get(&header, "invalidations").parse().unwrap_or(0);
    if invalidations > 0 {
        println!("de-optimization: {invalidations} assumption(s) invalidated by global overwrite");
    }
    Ok(())
}

fn parse_kv(line: &str) -> Vec<(String, String)> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
