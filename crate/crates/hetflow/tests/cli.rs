//! End-to-end checks of the `hetflow-bench` binary and its exit codes.

use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hetflow-bench"))
}

#[test]
fn run_writes_reports_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let trace = dir.path().join("trace.txt");
    let status = bench()
        .args([
            "run",
            "--dataset",
            "synth:aifb/8",
            "--mode",
            "reorg+merge",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--launch-overhead-us",
            "0",
        ])
        .arg("--out")
        .arg(&out)
        .arg("--trace-out")
        .arg(&trace)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.lines().count() >= 2, "csv missing rows:\n{csv}");
    assert!(out.with_extension("json").exists());
    assert!(trace.exists());
}

#[test]
fn bad_mode_exits_2() {
    let status = bench()
        .args(["run", "--dataset", "synth:aifb/8", "--mode", "warp"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let status = bench().args(["run", "--frobnicate"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn compare_flags_semantic_mismatch_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let status = bench()
            .args([
                "run",
                "--dataset",
                "synth:aifb/8",
                "--mode",
                "baseline",
                "--epochs",
                "1",
                "--launch-overhead-us",
                "0",
                "--seed",
                seed,
            ])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        out.with_extension("json")
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let same = bench().arg("compare").arg(&a).arg(&b).status().unwrap();
    assert_eq!(same.code(), Some(0));
    // Different seeds learn different losses: semantic mismatch.
    let c = run("c", "999");
    let diff = bench().arg("compare").arg(&a).arg(&c).status().unwrap();
    assert_eq!(diff.code(), Some(3));
    // Unreadable report: runtime failure.
    let missing = bench()
        .arg("compare")
        .arg(&a)
        .arg(dir.path().join("nope.json"))
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(4));
}
