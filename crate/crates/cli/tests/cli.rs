//! End-to-end checks of the `tspnet` binary: exit codes, reproducible
//! outputs, and subcommand plumbing on tiny datasets.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tspnet"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn tspnet");
    assert!(
        out.status.success(),
        "tspnet {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn generate(dir: &Path, name: &str, n: usize, count: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    run_ok(&[
        "generate",
        "--n",
        &n.to_string(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

fn train_micro_model(dir: &Path) -> std::path::PathBuf {
    let data = generate(dir, "train.txt", 8, 30, 5);
    let config = dir.join("train.cfg");
    std::fs::write(
        &config,
        "epochs=2\nsubset_per_epoch=30\nbatch_size=10\nval_interval_epochs=2\nseed=3\n\
         l_conv=1\nl_mlp=2\nh=8\nk=5\n",
    )
    .unwrap();
    let ckpt = dir.join("model.ckpt");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ckpt.exists());
    assert!(dir.join("model.log.csv").exists());
    ckpt
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.txt", 7, 12, 42);
    let b = generate(dir.path(), "b.txt", 7, 12, 42);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = generate(dir.path(), "c.txt", 7, 12, 43);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn beam_width_one_solve_matches_greedy_solve() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_micro_model(dir.path());
    let data = generate(dir.path(), "eval.txt", 8, 10, 9);
    let greedy_out = dir.path().join("greedy.txt");
    let beam_out = dir.path().join("beam1.txt");
    run_ok(&[
        "solve",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--decoder",
        "greedy",
        "--out",
        greedy_out.to_str().unwrap(),
    ]);
    run_ok(&[
        "solve",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--decoder",
        "beam",
        "--beam-width",
        "1",
        "--out",
        beam_out.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&greedy_out).unwrap(),
        std::fs::read(&beam_out).unwrap()
    );
}

#[test]
fn benchmark_exact_reports_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "bench.txt", 7, 15, 11);
    let out = run_ok(&[
        "benchmark",
        "--method",
        "exact",
        "--data",
        data.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,n,count,mean_len,mean_gap_pct,total_wall_ms,threads"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "exact");
    assert_eq!(row[1], "7");
    assert_eq!(row[2], "15");
    let gap: f64 = row[4].parse().unwrap();
    assert!(gap.abs() < 1e-6, "exact gap {gap}");
}

#[test]
fn sweep_and_render_work_on_a_micro_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_micro_model(dir.path());
    let data = generate(dir.path(), "eval.txt", 8, 8, 13);

    let out = run_ok(&[
        "sweep",
        "--axis",
        "beam_width",
        "--values",
        "1,2",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    assert!(stdout.contains("beam-shortest[b=1]"));
    assert!(stdout.contains("beam-shortest[b=2]"));

    let fig = dir.path().join("fig.svg");
    run_ok(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--index",
        "2",
        "--out",
        fig.to_str().unwrap(),
    ]);
    let svg = std::fs::read_to_string(&fig).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<circle").count(), 24); // 3 panels x n=8
}

#[test]
fn usage_errors_exit_one_data_errors_exit_two() {
    let out = bin().args(["generate", "--bogus-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["nonsense-subcommand"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin()
        .args(["benchmark", "--method", "exact", "--data", "/nonexistent/x.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // model method without a checkpoint is a data/model error
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d.txt", 6, 3, 1);
    let out = bin()
        .args(["benchmark", "--method", "greedy", "--data", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
