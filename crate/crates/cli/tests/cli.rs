use std::path::Path;
use std::process::{Command, Output};

use ape_cli::metrics::Table;

const SMALL: &[&str] = &[
    "--set",
    "data.samples_per_class=4",
    "--set",
    "encoder.channels=[4,8,8,8]",
    "--set",
    "moco.batch_size=8",
    "--set",
    "moco.queue_size=16",
    "--set",
    "probe.epochs=1",
];

fn ape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ape")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_epochs_writes_initial_row_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pre");
    let mut args = vec!["pretrain", "--out", path(&out), "--epochs", "0"];
    args.extend_from_slice(SMALL);
    let o = ape(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = Table::read(&out.join("pretrain.csv")).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.column("epoch").unwrap(), vec![Some(0.0)]);
    assert!(table.column("probe_acc").unwrap()[0].is_some());
    assert!(out.join("pretrain.ape").exists());
    assert!(out.join("config.json").exists());
}

#[test]
fn zero_env_steps_gives_one_row_then_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rl");
    let o = ape(&[
        "train-rl",
        "--out",
        path(&out),
        "--env-steps",
        "0",
        "--set",
        "rl.eval_episodes=1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("rl.csv");
    let table = Table::read(&csv).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.column("env_steps").unwrap(), vec![Some(0.0)]);
    assert_eq!(table.column("model_loss").unwrap(), vec![None]);

    let o = ape(&["eval", "--ckpt", path(&out.join("rl.ape")), "--episodes", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("mean return"));

    let plots = dir.path().join("plots");
    let o = ape(&["plot", "--metrics", path(&csv), "--out", path(&plots), "--columns", "episode_return"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(plots.join("episode_return.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn bad_overrides_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for set in ["moco.no_such_key=1", "nonsense", "profile=\"laptop\""] {
        let o = ape(&["pretrain", "--out", path(&out), "--epochs", "0", "--set", set]);
        assert!(!o.status.success(), "{set} accepted");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"), "{set}");
    }
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let o = ape(&["eval", "--ckpt", "/nonexistent/rl.ape"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
