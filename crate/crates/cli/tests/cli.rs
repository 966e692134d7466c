//! End-to-end behavior of the crprune binary on small configurations:
//! exit codes, determinism of artifacts, and the documented flag semantics.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_crprune")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) {
    let cfg = r#"{
  "schedule": {"T": 10},
  "data": {"n_per_class": 2},
  "train": {"epochs": 2, "batch": 4, "lr": 0.05},
  "sa": {"n_iter": 4, "n_eval": 4, "size": "12x12"},
  "eval": {"sizes": ["12x12"], "n": 16}
}"#;
    std::fs::write(dir.join("cfg.json"), cfg).unwrap();
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn last_line_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or("");
    serde_json::from_str(line).expect("final log line is JSON")
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"model": {"wobble": 1}}"#).unwrap();
    let out = run_in(dir.path(), &["--config", "bad.json", "train"]);
    assert_eq!(out.status.code(), Some(2));
    let log = last_line_json(&out);
    assert_eq!(log["status"], "error");
    assert_eq!(log["code"], 2);
}

#[test]
fn unknown_class_id_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"data": {"classes": ["plaid"]}}"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["--config", "bad.json", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nan_checkpoint_exits_3_on_sampling() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &["--config", "cfg.json", "train", "--epochs", "0"],
    );
    assert_ok(&out);
    // Corrupt one payload float into a NaN.
    let ckpt = dir.path().join("runs/model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    bytes[nl + 1..nl + 5].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let out = run_in(
        dir.path(),
        &["--config", "cfg.json", "sample", "--n", "1", "--size", "12x12"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(last_line_json(&out)["code"], 3);
}

#[test]
fn epochs_zero_writes_initialized_checkpoint_deterministically() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for d in [dir_a.path(), dir_b.path()] {
        write_tiny_config(d);
        let out = run_in(d, &["--config", "cfg.json", "train", "--epochs", "0"]);
        assert_ok(&out);
        assert_eq!(last_line_json(&out)["summary"]["epochs_done"], 0);
    }
    let a = std::fs::read(dir_a.path().join("runs/model.ckpt")).unwrap();
    let b = std::fs::read(dir_b.path().join("runs/model.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resumed_training_matches_uninterrupted_checkpoint() {
    let full = tempfile::tempdir().unwrap();
    write_tiny_config(full.path());
    assert_ok(&run_in(
        full.path(),
        &["--config", "cfg.json", "train", "--epochs", "2"],
    ));

    let resumed = tempfile::tempdir().unwrap();
    write_tiny_config(resumed.path());
    assert_ok(&run_in(
        resumed.path(),
        &["--config", "cfg.json", "train", "--epochs", "1"],
    ));
    assert_ok(&run_in(
        resumed.path(),
        &["--config", "cfg.json", "train", "--resume", "--epochs", "2"],
    ));

    let a = std::fs::read(full.path().join("runs/model.ckpt")).unwrap();
    let b = std::fs::read(resumed.path().join("runs/model.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn k_flag_collapses_match_single_model_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    assert_ok(&run_in(dir.path(), &["--config", "cfg.json", "train"]));
    assert_ok(&run_in(
        dir.path(),
        &["--config", "cfg.json", "prune", "--uniform", "0.4"],
    ));

    let sample = |extra: &[&str], out: &str| {
        let mut args = vec![
            "--config", "cfg.json", "sample", "--n", "2", "--size", "12x12", "--seed", "9",
            "--out-dir", out,
        ];
        args.extend_from_slice(extra);
        assert_ok(&run_in(dir.path(), &args));
    };
    sample(&[], "runs/dense");
    sample(&["--mask", "runs/mask.bin"], "runs/pruned");
    sample(&["--mask", "runs/mask.bin", "--k", "0"], "runs/k0");
    sample(&["--mask", "runs/mask.bin", "--k", "1"], "runs/k1");

    let read = |sub: &str, i: usize, class: &str| {
        std::fs::read(dir.path().join(format!("runs/{sub}/img_000{i}_{class}.pgm"))).unwrap()
    };
    for (i, class) in [(0, "checkerboard"), (1, "stripes")] {
        assert_eq!(read("dense", i, class), read("k0", i, class), "k=0 vs dense");
        assert_eq!(read("pruned", i, class), read("k1", i, class), "k=1 vs pruned");
    }
    // The amplified run logs per-step divergence statistics.
    assert!(dir.path().join("runs/k0/divergence.csv").exists());
}

#[test]
fn k_without_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &["--config", "cfg.json", "sample", "--k", "1.5"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_zero_grid_point_reproduces_dense_eval_row() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    assert_ok(&run_in(dir.path(), &["--config", "cfg.json", "train"]));
    assert_ok(&run_in(
        dir.path(),
        &["--config", "cfg.json", "sweep", "--grid", "0", "--size", "12x12"],
    ));
    assert_ok(&run_in(dir.path(), &["--config", "cfg.json", "eval"]));

    let sweep_csv = std::fs::read_to_string(dir.path().join("runs/sweep_report.csv")).unwrap();
    let eval_csv = std::fs::read_to_string(dir.path().join("runs/eval_dense.csv")).unwrap();
    let sweep_row: Vec<&str> = sweep_csv.lines().nth(1).unwrap().split(',').collect();
    let eval_row: Vec<&str> = eval_csv.lines().nth(1).unwrap().split(',').collect();
    // ffd and mean_score agree exactly under shared seeds.
    assert_eq!(sweep_row[2], eval_row[2]);
    assert_eq!(sweep_row[3], eval_row[3]);
}

#[test]
fn dataset_dump_writes_pgm_files_and_index() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &["--config", "cfg.json", "dataset", "dump", "--n", "2", "--size", "16x16"],
    );
    assert_ok(&out);
    let index: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/dataset/index.json")).unwrap(),
    )
    .unwrap();
    let entries = index.as_array().unwrap();
    assert_eq!(entries.len(), 8);
    for e in entries {
        let file = e["file"].as_str().unwrap();
        assert!(dir.path().join("runs/dataset").join(file).exists());
        assert_eq!(e["H"], 16);
        assert!(e["seed"].as_u64().is_some());
    }
    // PGM header sanity.
    let first = entries[0]["file"].as_str().unwrap();
    let bytes = std::fs::read(dir.path().join("runs/dataset").join(first)).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn synthetic_search_writes_monotone_best_trace() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "--config", "cfg.json", "search", "--objective", "synthetic", "--n-iter", "60",
        ],
    );
    assert_ok(&out);
    let trace = std::fs::read_to_string(dir.path().join("runs/search_trace.csv")).unwrap();
    let mut prev = f64::INFINITY;
    let mut rows = 0;
    for line in trace.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 8);
        let e_best: f64 = cols[7].parse().unwrap();
        assert!(e_best <= prev);
        prev = e_best;
        rows += 1;
    }
    assert_eq!(rows, 60);
    let best: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/best_config.json")).unwrap(),
    )
    .unwrap();
    assert!(best["r_down"].is_number());
}

#[test]
fn commands_are_idempotent_given_config_and_seeds() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for d in [dir_a.path(), dir_b.path()] {
        write_tiny_config(d);
        assert_ok(&run_in(d, &["--config", "cfg.json", "train"]));
        assert_ok(&run_in(d, &["--config", "cfg.json", "prune", "--uniform", "0.3"]));
        assert_ok(&run_in(d, &["--config", "cfg.json", "eval"]));
    }
    for file in [
        "runs/model.ckpt",
        "runs/train_loss.csv",
        "runs/mask.bin",
        "runs/eval_dense.csv",
        "runs/train_config.json",
    ] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for (d, threads) in [(dir_a.path(), "1"), (dir_b.path(), "2")] {
        write_tiny_config(d);
        let out = Command::new(bin())
            .args(["--config", "cfg.json", "train"])
            .env("CRPRUNE_THREADS", threads)
            .current_dir(d)
            .output()
            .unwrap();
        assert_ok(&out);
    }
    let a = std::fs::read(dir_a.path().join("runs/model.ckpt")).unwrap();
    let b = std::fs::read(dir_b.path().join("runs/model.ckpt")).unwrap();
    assert_eq!(a, b);
}
