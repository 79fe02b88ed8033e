use std::fs;
use std::path::Path;

use saint::harness::cli::run_with;

fn cli(args: &[&str]) -> (i32, String, String) {
    let argv: Vec<String> = std::iter::once("saint")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(&argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.txt");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn oracle_prints_nine_for_the_three_cell_line() {
    let (code, out, _) = cli(&[
        "oracle",
        "-s",
        "env.D=1",
        "-s",
        "env.M=3",
        "-s",
        "env.pit_fraction=0",
        "-s",
        "train.discount=1",
    ]);
    assert_eq!(code, 0);
    assert_eq!(out, "9.0\n");
}

#[test]
fn missing_env_field_is_named() {
    let (code, _, err) = cli(&[
        "train",
        "-s",
        "env.M=5",
        "-s",
        "env.pit_fraction=0",
        "-s",
        "policy.class=saint",
    ]);
    assert_eq!(code, 3);
    assert!(err.contains("env.D"), "{err}");
}

#[test]
fn failure_kinds_have_distinct_codes() {
    let (code, _, _) = cli(&["train", "--no-such-flag"]);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _, err) = cli(&["train", "-c", "/nonexistent/exp.txt"]);
    assert_eq!(code, 5, "{err}");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "env.D = 11\nenv.M = 3\nenv.pit_fraction = 0\npolicy.class = flat\n",
    );
    let (code, _, err) = cli(&["train", "-c", &cfg]);
    assert_eq!(code, 4, "{err}");
    let cfg = write_config(dir.path(), "env.D = two\n");
    let (code, _, err) = cli(&["train", "-c", &cfg]);
    assert_eq!(code, 3);
    assert!(err.contains("env.D"), "{err}");
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("grad-check"));
}

#[test]
fn train_then_eval_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &format!(
            "env.D = 2\nenv.M = 4\nenv.pit_fraction = 0.25\npolicy.class = saint\n\
             train.max_episodes = 20\nrun.seeds = 0,1\nrun.out_dir = {}\n",
            out_dir.display()
        ),
    );
    let (code, out, err) = cli(&["train", "-c", &cfg]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("over 2 seeds"), "{out}");
    assert!(err.contains("seed 1"));
    let ckpt = out_dir.join("checkpoint_seed1.txt");
    let (code, out, err) = cli(&[
        "eval",
        "-c",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes",
        "5",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(
        out.starts_with("greedy ") && out.contains("\nstochastic "),
        "{out}"
    );
}

#[test]
fn dataset_then_offline_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("d.jsonl");
    let cfg = write_config(
        dir.path(),
        &format!(
            "env.D = 2\nenv.M = 4\nenv.pit_fraction = 0.25\npolicy.class = factorized\n\
             train.epochs = 1\nrun.out_dir = {}\n",
            dir.path().join("off").display()
        ),
    );
    let (code, out, err) = cli(&[
        "gen-dataset",
        "-c",
        &cfg,
        "-o",
        ds.to_str().unwrap(),
        "--transitions",
        "500",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("500 transitions"), "{out}");
    let (code, out, err) = cli(&["train-offline", "-c", &cfg, "-d", ds.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("evaluated mean"), "{out}");
    // A dataset from another layout is refused.
    let (code, _, _) = cli(&[
        "train-offline",
        "-c",
        &cfg,
        "-s",
        "env.seed=5",
        "-d",
        ds.to_str().unwrap(),
    ]);
    assert_eq!(code, 4);
}

#[test]
fn sweep_writes_a_combined_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "env.D = 2\nenv.M = 3\nenv.pit_fraction = 0\npolicy.class = saint\n\
             train.max_episodes = 10\nrun.out_dir = {}\n",
            dir.path().join("sw").display()
        ),
    );
    let (code, out, err) = cli(&[
        "sweep",
        "-c",
        &cfg,
        "--dims",
        "2",
        "--pits",
        "0,1",
        "--classes",
        "saint,flat",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 4, "{out}");
    let summary = fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    assert!(
        summary.starts_with("label,class,D,M,pit_fraction,L,H,params,seeds,final_mean,final_std\n")
    );
    assert_eq!(summary.lines().count(), 5);
    assert!(dir.path().join("sw/flat_D2_p1/metrics_seed0.csv").exists());
}

#[test]
fn grad_check_passes_on_defaults() {
    let (code, out, err) = cli(&["grad-check"]);
    assert_eq!(code, 0, "{err}");
    let tail = out.split("max relative error ").nth(1).unwrap();
    let value: f64 = tail.split_whitespace().next().unwrap().parse().unwrap();
    assert!(value < 1e-4, "{out}");
}
