use std::fs;
use std::path::Path;
use std::process::Command;

const HOT_LOOP: &str = "module hotloop\n\
    proc work nparams 1\n\
    block b0\n  a = const 2\n  b = const 3\n  c = add a b\n  d = mul c c\n  e = add d p0\n  ret e\n\
    proc main nparams 1 entry\n\
    block b0\n  i = const 0\n  acc = const 0\n  br head\n\
    block head\n  c = cmp_lt i p0\n  br_if c body exit\n\
    block body\n  v = call work (i)\n  acc = add acc v\n  one = const 1\n  i = add i one\n  br head\n\
    block exit\n  ret acc\n";

const HELLO: &str = "module hello\n\
    proc main nparams 0 entry\n\
    block b0\n  v = const 42\n  ret v\n";

fn adaptvm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptvm"))
}

fn write(dir: &Path, name: &str, content: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_hot_loop_swaps_and_asserts() {
    let dir = tempfile::tempdir().unwrap();
    let workload = write(dir.path(), "hot.tm", HOT_LOOP);
    let out = adaptvm()
        .args([
            "run", &workload, "--arg", "4000", "--sim-sleep", "2000", "--age-sleep",
            "200000", "--assert", "swaps>=1", "--assert", "result==8098000",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("result: 8098000"), "{stdout}");
}

#[test]
fn run_short_program_zero_swaps() {
    let dir = tempfile::tempdir().unwrap();
    let workload = write(dir.path(), "hello.tm", HELLO);
    let out = adaptvm()
        .args(["run", &workload, "--assert", "swaps==0", "--assert", "result==42"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failed_assertion_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let workload = write(dir.path(), "hello.tm", HELLO);
    let out = adaptvm()
        .args(["run", &workload, "--assert", "result==7"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("assertion failed"));
}

#[test]
fn trace_is_deterministic_and_consistent_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let workload = write(dir.path(), "hot.tm", HOT_LOOP);
    let run = |tag: &str| {
        let trace = dir.path().join(format!("t{tag}.txt"));
        let report = dir.path().join(format!("r{tag}.txt"));
        let out = adaptvm()
            .args([
                "run", &workload, "--arg", "4000", "--sim-sleep", "2000", "--age-sleep",
                "200000", "--seed", "7", "--mode", "single-task", "--trace",
                trace.to_str().unwrap(), "--report", report.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (fs::read(trace).unwrap(), fs::read_to_string(report).unwrap())
    };
    let (trace_a, report_a) = run("a");
    let (trace_b, report_b) = run("b");
    assert_eq!(trace_a, trace_b, "traces are not byte-identical");
    assert_eq!(report_a, report_b);

    // Every swap in the report appears exactly once in the trace.
    let trace_text = String::from_utf8(trace_a).unwrap();
    let report_swaps: Vec<&str> = report_a
        .lines()
        .filter_map(|l| l.strip_prefix("swap "))
        .collect();
    assert!(!report_swaps.is_empty());
    for body in &report_swaps {
        let hits = trace_text
            .lines()
            .filter(|l| l.split_once(" event=swap ").map(|(_, r)| r) == Some(*body))
            .count();
        assert_eq!(hits, 1, "swap `{body}` appears {hits} times in trace");
    }
    let trace_swaps = trace_text.lines().filter(|l| l.contains(" event=swap ")).count();
    assert_eq!(trace_swaps, report_swaps.len());
}

#[test]
fn config_file_applies_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let workload = write(dir.path(), "hello.tm", HELLO);
    let config = write(
        dir.path(),
        "cfg.toml",
        "phases = \"none\"\nprofilers = \"sampling\"\ngate = 0.5\nargs = []\n",
    );
    // Config alone: no phases, so no optimizations.
    let out = adaptvm()
        .args(["run", &workload, "--config", &config, "--assert", "optimizations==0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // A bad gate from the command line overrides the config and is rejected.
    let out = adaptvm()
        .args(["run", &workload, "--config", &config, "--gate", "1.5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn sim_evaluates_vector_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let vectors = write(
        dir.path(),
        "v.txt",
        "# pairs\n1 1 | 2 1\n3 3 | 3 3\n1000 0 | 0 1000\n",
    );
    let out = adaptvm().args(["sim", &vectors]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let verdicts: Vec<&str> = stdout
        .lines()
        .filter_map(|l| l.trim().strip_prefix("verdict = "))
        .collect();
    assert_eq!(verdicts, ["no reoptimization", "stable", "reoptimize"]);
}

#[test]
fn explain_renders_report() {
    let dir = tempfile::tempdir().unwrap();
    let workload = write(dir.path(), "hot.tm", HOT_LOOP);
    let report = dir.path().join("r.txt");
    let out = adaptvm()
        .args([
            "run", &workload, "--arg", "4000", "--sim-sleep", "2000", "--age-sleep",
            "200000", "--report", report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = adaptvm().args(["explain", report.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("run summary"));
    assert!(stdout.contains("procedure work"));
    assert!(stdout.contains("swapped"));

    // An empty run explains as "no optimizations performed".
    let hello = write(dir.path(), "hello.tm", HELLO);
    let empty_report = dir.path().join("empty.txt");
    adaptvm()
        .args(["run", &hello, "--report", empty_report.to_str().unwrap()])
        .output()
        .unwrap();
    let out = adaptvm()
        .args(["explain", empty_report.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("no optimizations performed"));
}
