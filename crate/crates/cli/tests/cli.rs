//! End-to-end tests against the built binary: exit codes, budget
//! arithmetic, bank determinism, kill/resume fidelity, eval and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn nsd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nsd"))
}

fn run(args: &[&str]) -> Output {
    nsd().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// A fast config: tiny MLP on 4x4 blobs.
fn fast_sets(dir: &Path) -> Vec<String> {
    [
        format!("out.dir={}", dir.display()),
        "dataset.height=4".into(),
        "dataset.width=4".into(),
        "dataset.train_per_class=16".into(),
        "dataset.test_per_class=8".into(),
        "dataset.noise=0.2".into(),
        "model.family=mlp".into(),
        "model.depth=1".into(),
        "model.width=4".into(),
        "expert.count=1".into(),
        "expert.epochs=4".into(),
        "expert.batch_size=8".into(),
        "distill.inner_steps=2".into(),
        "distill.batch_size=8".into(),
        "distill.real_batch_size=8".into(),
        "distill.outer_lr=1.0".into(),
        "eval.repeats=2".into(),
        "eval.epochs=10".into(),
    ]
    .into_iter()
    .collect()
}

fn with_sets(cmd: &str, sets: &[String], extra: &[&str]) -> Vec<String> {
    let mut args = vec![cmd.to_string()];
    for s in sets {
        args.push("--set".into());
        args.push(s.clone());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run_strings(args: &[String]) -> Output {
    nsd().args(args).output().expect("binary runs")
}

#[test]
fn budget_reports_the_worked_instance() {
    let dir = tempfile::tempdir().unwrap();
    // A 10-class, 3-channel, 32x32 raw dataset: 20 records suffice.
    let raw = dir.path().join("data.bin");
    let mut bytes = Vec::new();
    for r in 0..20u8 {
        bytes.push(r % 10);
        for p in 0..3 * 32 * 32 {
            bytes.extend((((p % 17) as f32) / 17.0).to_le_bytes());
        }
    }
    fs::write(&raw, &bytes).unwrap();

    let out = run(&[
        "budget",
        "--set", &format!("out.dir={}", dir.path().display()),
        "--set", "dataset.source=raw",
        "--set", &format!("dataset.path={}", raw.display()),
        "--set", "dataset.channels=3",
        "--set", "dataset.height=32",
        "--set", "dataset.width=32",
        "--set", "dataset.classes=10",
        "--set", "budget.ipc=1",
        "--set", "decomp.tensors=1",
        "--set", "decomp.t1=35",
        "--set", "decomp.t3=16",
        "--set", "decomp.u1=64",
    ]);
    let text = stdout_of(&out);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("stored=30153 allowed=30720"), "{text}");
    assert!(text.contains("utilization=0.9815"), "{text}");
    assert!(text.contains("budget ok"), "{text}");
}

#[test]
fn bad_config_exits_2_and_missing_bank_exits_3() {
    let out = run(&["budget", "--set", "budget.ipc=0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["budget", "--set", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let sets = fast_sets(dir.path());
    let out = run_strings(&with_sets("distill", &sets, &[]));
    assert_eq!(out.status.code(), Some(3), "missing bank is an I/O error");
}

#[test]
fn zero_trajectories_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = fast_sets(dir.path());
    sets.push("expert.count=0".into());
    let out = run_strings(&with_sets("expert", &sets, &[]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn expert_banks_are_deterministic_per_seed() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [dir_a.path(), dir_b.path()] {
        let sets = fast_sets(dir);
        let out = run_strings(&with_sets("expert", &sets, &[]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir_a.path().join("bank/traj_000.nsdt")).unwrap();
    let b = fs::read(dir_b.path().join("bank/traj_000.nsdt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed, same bytes");
}

#[test]
fn fingerprint_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let sets = fast_sets(dir.path());
    let out = run_strings(&with_sets("expert", &sets, &[]));
    assert!(out.status.success());
    // Same out dir, different data.
    let mut other = sets.clone();
    other.push("dataset.seed=99".into());
    let out = run_strings(&with_sets("distill", &other, &[]));
    assert_eq!(out.status.code(), Some(4));
}

fn read_log(dir: &Path) -> String {
    fs::read_to_string(dir.join("metrics.log")).unwrap()
}

#[test]
fn killed_distill_resumes_bitwise() {
    let full_dir = tempfile::tempdir().unwrap();
    let killed_dir = tempfile::tempdir().unwrap();

    for dir in [full_dir.path(), killed_dir.path()] {
        let mut sets = fast_sets(dir);
        sets.push("distill.iterations=200".into());
        sets.push("distill.checkpoint_interval=20".into());
        let out = run_strings(&with_sets("expert", &sets, &[]));
        assert!(out.status.success());
    }

    // Uninterrupted run.
    let mut sets = fast_sets(full_dir.path());
    sets.push("distill.iterations=200".into());
    sets.push("distill.checkpoint_interval=20".into());
    let out = run_strings(&with_sets("distill", &sets, &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full_log = read_log(full_dir.path());
    assert_eq!(full_log.lines().count(), 200);

    // Killed mid-flight, then resumed with the identical command.
    let mut sets = fast_sets(killed_dir.path());
    sets.push("distill.iterations=200".into());
    sets.push("distill.checkpoint_interval=20".into());
    let args = with_sets("distill", &sets, &[]);
    let mut child = nsd()
        .args(&args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mpath = killed_dir.path().join("metrics.log");
    let started = Instant::now();
    loop {
        if started.elapsed() > Duration::from_secs(60) {
            let _ = child.kill();
            panic!("distill never reached 100 steps");
        }
        let lines = fs::read_to_string(&mpath).map(|s| s.lines().count()).unwrap_or(0);
        if lines >= 100 {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    let _ = child.wait();

    let out = run_strings(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_of(&out).contains("resuming from step"));
    let resumed_log = read_log(killed_dir.path());
    assert_eq!(full_log, resumed_log, "resumed log differs from uninterrupted log");

    // The state container round-trips bitwise through a read/write.
    let state_bytes = fs::read(killed_dir.path().join("state.nsdt")).unwrap();
    let full_state = fs::read(full_dir.path().join("state.nsdt")).unwrap();
    assert_eq!(state_bytes, full_state);
}

#[test]
fn eval_and_export_work_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = fast_sets(dir.path());
    sets.push("distill.iterations=10".into());
    sets.push("distill.checkpoint_interval=5".into());

    let out = run_strings(&with_sets("expert", &sets, &[]));
    assert!(out.status.success());
    let out = run_strings(&with_sets("distill", &sets, &[]));
    assert!(out.status.success());

    let out1 = run_strings(&with_sets("eval", &sets, &[]));
    assert!(out1.status.success(), "{}", String::from_utf8_lossy(&out1.stderr));
    let report1 = fs::read_to_string(dir.path().join("eval.txt")).unwrap();
    let out2 = run_strings(&with_sets("eval", &sets, &[]));
    assert!(out2.status.success());
    let report2 = fs::read_to_string(dir.path().join("eval.txt")).unwrap();
    assert_eq!(report1, report2, "equal seeds, equal reports");
    assert!(report1.contains("repeats=2"));

    let grid = dir.path().join("grid.pgm");
    let checkpoint: PathBuf = dir.path().join("state.nsdt");
    let out = run(&[
        "export",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        grid.to_str().unwrap(),
        "--cols",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&grid).unwrap();
    assert!(bytes.starts_with(b"P5\n"), "grayscale grid starts with the P5 magic");

    // Missing checkpoint is an I/O error.
    let out = run(&[
        "eval",
        "--set",
        &format!("out.dir={}", dir.path().display()),
        "--checkpoint",
        dir.path().join("nope.nsdt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
