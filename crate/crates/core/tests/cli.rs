//! End-to-end CLI checks over tiny runs: artifact layout, exit codes, and
//! the machine-parseable error line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cosearch"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "mode = \"joint\"\nrng_seed = 5\n\n[env]\nmax_steps = 12\n\n[train]\nepisodes = 6\npretrain_episodes = 4\n\n[eval]\nepisodes = 8\ntrajectory_episodes = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn train_evaluate_compare_dump_round_trip() {
    let dir = tmp("roundtrip");
    let config = tiny_config(&dir);

    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("joint"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in [
        "checkpoint.ckpt",
        "config.resolved.toml",
        "manifest.txt",
        "train_log.csv",
        "pretrain_a0_log.csv",
        "trajectories.csv",
        "eval_summary.csv",
        "eval_recall.csv",
    ] {
        assert!(dir.join("joint").join(artifact).exists(), "{artifact} missing");
    }

    // a single-mode sibling for compare
    let out = bin()
        .args(["train", "--mode", "single", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("single"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = bin()
        .args(["evaluate", "--episodes", "5", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(dir.join("joint/checkpoint.ckpt"))
        .arg("--out")
        .arg(dir.join("eval"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("eval/eval_summary.csv").exists());

    let out = bin()
        .args(["compare", "--episodes", "5", "--config"])
        .arg(&config)
        .arg("--joint")
        .arg(dir.join("joint/checkpoint.ckpt"))
        .arg("--single")
        .arg(dir.join("single/checkpoint.ckpt"))
        .arg("--out")
        .arg(dir.join("cmp"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let compare = fs::read_to_string(dir.join("cmp/compare.csv")).unwrap();
    assert!(compare.starts_with("class,accuracy_joint,accuracy_single,delta"));
    assert_eq!(compare.lines().count(), 3); // header + one row per class

    let out = bin()
        .args(["dump-trajectory", "--episodes", "2", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(dir.join("joint/checkpoint.ckpt"))
        .arg("--out")
        .arg(dir.join("traj"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(dir.join("traj/trajectories.csv")).unwrap();
    assert!(traj.starts_with("episode_id,t,agent_id,action_code,x,y,w,h,reward,iou"));
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = bin().args(["gradcheck", "--seeds", "4"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("pass"));
}

#[test]
fn config_errors_produce_machine_parseable_lines() {
    let dir = tmp("errors");
    let bad = dir.join("bad.toml");
    fs::write(&bad, "[train]\ngamma = 1.5\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().next().unwrap_or("");
    assert!(line.starts_with("error: category=config"), "{stderr}");
    assert!(line.contains("gamma"), "{stderr}");

    // unknown key
    fs::write(&bad, "[train]\nlearning_rato = 0.1\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: category=config"));

    // missing checkpoint file
    let cfg = tiny_config(&dir);
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(dir.join("nope.ckpt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: category=io"));
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let dir = tmp("mismatch");
    let config = tiny_config(&dir);
    let out = bin()
        .args(["train", "--mode", "single", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert!(out.status.success());

    // a config with a different grid size implies a different input width
    let other = dir.join("other.toml");
    fs::write(&other, "[observation]\ngrid_size = 6\n").unwrap();
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&other)
        .arg("--checkpoint")
        .arg(dir.join("run/checkpoint.ckpt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: category=checkpoint"), "{stderr}");
}
