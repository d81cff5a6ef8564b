//! End-to-end runs of the `fmchest` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fmchest"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL_NET: &str = r#"{
  "network": {"base_channels": 8, "level_multipliers": [1, 2], "res_blocks_per_level": 1,
              "mid_attention": false, "time_embed_dim": 16, "norm_groups": 4},
  "train": {"epochs": 1, "batch_size": 8},
  "ladder": {"sigma_max": 1.0, "sigma_min": 0.01, "levels": 20}
}"#;

fn data(ws: &Workspace, seed: &str) -> PathBuf {
    ws.ok(&[
        "generate-data", "--m", "8", "--n", "8", "--train", "16", "--val", "8", "--test", "6", "--seed", seed,
        "--out", "d.bin",
    ]);
    ws.path("d.bin")
}

#[test]
fn generate_data_writes_a_dataset() {
    let ws = Workspace::new();
    let stdout = ws.ok(&[
        "generate-data", "--m", "8", "--n", "32", "--train", "200", "--val", "50", "--test", "50", "--out", "d.bin",
    ]);
    assert!(stdout.contains("8x32"), "{stdout}");
    let bytes = std::fs::read(ws.path("d.bin")).unwrap();
    assert_eq!(&bytes[..8], b"FMCHEST1");
    assert_eq!(bytes.len(), 64 + 300 * 256 * 2 * 4);
    let ds = fmchest::channel::load_dataset(ws.path("d.bin")).unwrap();
    assert_eq!(ds.shape(), (8, 32));
}

#[test]
fn seed_flag_controls_the_data() {
    let ws = Workspace::new();
    let a = std::fs::read(data(&ws, "1")).unwrap();
    let b = std::fs::read(data(&ws, "1")).unwrap();
    let c = std::fs::read(data(&ws, "2")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn settings_file_feeds_generate_data() {
    let ws = Workspace::new();
    let cfg = ws.write(
        "gen.json",
        r#"{"channel": {"m_rx": 4, "n_tx": 8, "n_clusters": 2}, "splits": {"train": 3, "val": 2, "test": 1}}"#,
    );
    ws.ok(&["generate-data", "--config", cfg.to_str().unwrap(), "--test", "5", "--out", "g.bin"]);
    let ds = fmchest::channel::load_dataset(ws.path("g.bin")).unwrap();
    assert_eq!(ds.shape(), (4, 8));
    assert_eq!(ds.config.n_clusters, 2);
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (3, 2, 5));
}

fn train_both(ws: &Workspace) {
    data(ws, "3");
    let cfg = ws.write("net.json", SMALL_NET);
    let cfg = cfg.to_str().unwrap();
    let out = ws.ok(&[
        "train-fm", "--config", cfg, "--data", "d.bin", "--out", "fm.ckpt", "--epochs", "2", "--lr", "1e-3", "--log",
        "fm.csv",
    ]);
    assert!(out.contains("best epoch"), "{out}");
    let log = fmchest::train::read_training_log(ws.path("fm.csv")).unwrap();
    assert_eq!(log.len(), 3);
    ws.ok(&["train-sm", "--config", cfg, "--data", "d.bin", "--out", "sm.ckpt", "--sigma-floor", "0.02"]);
    let sm = fmchest::score::ScoreModel::load(ws.path("sm.ckpt")).unwrap();
    assert_eq!(sm.ladder.sigma_min, 0.02);
    assert_eq!(sm.ladder.levels, 20);
}

#[test]
fn train_estimate_sweep_and_time() {
    let ws = Workspace::new();
    train_both(&ws);

    let out = ws.ok(&[
        "estimate", "--data", "d.bin", "--checkpoint", "fm.ckpt", "--steps", "4", "--count", "3", "--trajectory",
        "traj.csv",
    ]);
    assert!(out.contains("LS NMSE") && out.contains("after 4 steps"), "{out}");
    let traj = std::fs::read_to_string(ws.path("traj.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("step,nmse_db"));
    assert_eq!(traj.lines().count(), 6);

    let exp = ws.write(
        "exp.json",
        r#"{"dataset": "d.bin", "pilots": {"n": 8, "t": 8, "power": 1.0},
            "estimators": [{"kind": "ls"}, {"kind": "fm", "checkpoint": "fm.ckpt", "steps": [1, 2]},
                           {"kind": "sm", "checkpoint": "sm.ckpt", "k": 4, "l": 2}],
            "snr_db": [0, 10], "trials": 4, "seed": 9}"#,
    );
    ws.ok(&["sweep", "--config", exp.to_str().unwrap(), "--out", "r.csv"]);
    let rows = fmchest::bench::read_csv(ws.path("r.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    let text = std::fs::read_to_string(ws.path("r.csv")).unwrap();
    assert!(text.starts_with("estimator,snr_db,steps,nmse_db,nmse_stderr_db,wall_s,evals\n"));

    let out = ws.ok(&[
        "timing", "--data", "d.bin", "--fm-checkpoint", "fm.ckpt", "--sm-checkpoint", "sm.ckpt", "--fm-steps", "1,5",
        "--sm-kl", "5,3", "--samples", "2", "--out", "t.csv",
    ]);
    assert!(out.contains("total time"), "{out}");
    let t = std::fs::read_to_string(ws.path("t.csv")).unwrap();
    assert_eq!(t.lines().next(), Some("method,steps,evals_per_sample,samples,total_s"));
    assert_eq!(t.lines().count(), 4);
    assert!(t.lines().nth(3).unwrap().starts_with("sm,15,15,2,"));
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new();
    let out = ws.run(&["generate-data", "--out", "x.bin", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&ws.run(&["no-such-command"])), 1);
    assert_eq!(code(&ws.run(&["generate-data", "--m", "eight", "--out", "x.bin"])), 1);
}

#[test]
fn help_exits_with_zero() {
    let ws = Workspace::new();
    let out = ws.run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["generate-data", "train-fm", "train-sm", "estimate", "sweep", "timing"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn config_errors_exit_with_one() {
    let ws = Workspace::new();
    let bad = ws.write("bad.json", "{ not json");
    let bad = bad.to_str().unwrap();
    assert_eq!(code(&ws.run(&["generate-data", "--config", bad, "--out", "x.bin"])), 1);
    assert_eq!(code(&ws.run(&["sweep", "--config", bad, "--out", "r.csv"])), 1);
    assert_eq!(code(&ws.run(&["sweep", "--out", "r.csv"])), 1);
    assert_eq!(code(&ws.run(&["sweep", "--config", "absent.json", "--out", "r.csv"])), 1);
    // invalid parameter values
    assert_eq!(code(&ws.run(&["generate-data", "--m", "0", "--out", "x.bin"])), 1);
    data(&ws, "4");
    let exp = ws.write(
        "exp.json",
        r#"{"dataset": "d.bin", "pilots": {"n": 8, "t": 8, "power": 1.0},
            "estimators": [{"kind": "fm", "checkpoint": "missing.ckpt", "steps": [5]}],
            "snr_db": [10], "trials": 2}"#,
    );
    assert_eq!(code(&ws.run(&["sweep", "--config", exp.to_str().unwrap(), "--out", "r.csv"])), 1);
    assert_eq!(code(&ws.run(&["timing", "--data", "d.bin"])), 1);
}

#[test]
fn runtime_errors_exit_with_two() {
    let ws = Workspace::new();
    let out = ws.run(&["train-fm", "--data", "absent.bin", "--out", "fm.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    std::fs::write(ws.path("junk.bin"), b"not a dataset").unwrap();
    assert_eq!(code(&ws.run(&["train-fm", "--data", "junk.bin", "--out", "fm.ckpt"])), 2);
    data(&ws, "5");
    assert_eq!(
        code(&ws.run(&["generate-data", "--out", Path::new("no").join("such").join("dir.bin").to_str().unwrap()])),
        2
    );
}
