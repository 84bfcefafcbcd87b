mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flap::metrics::{strip_columns, WALL_CLOCK_COLUMNS};

fn flap(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flap"))
        .args(args)
        .env("FLAP_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, common::TINY_TOML).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

#[test]
fn train_adapt_report_end_to_end() {
    let (dir, cfg) = setup();
    let root = dir.path();
    ok(&flap(
        root,
        &["train", "--config", &cfg, "--seed", "3", "--out", "run"],
    ));
    let run = root.join("run");
    for f in [
        "config.json",
        "tasks.json",
        "metrics.csv",
        "checkpoint.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ck = run.join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let out = flap(
        root,
        &[
            "adapt",
            "--checkpoint",
            ck,
            "--split",
            "ood",
            "--t-adapt",
            "2",
        ],
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean return over 2 ood tasks"));
    ok(&flap(
        root,
        &[
            "adapt",
            "--checkpoint",
            ck,
            "--mode",
            "gradient",
            "--budget",
            "20",
        ],
    ));
    assert!(run.join("curves.csv").exists() && run.join("runtime.csv").exists());
    let out = flap(root, &["report", run.to_str().unwrap()]);
    ok(&out);
    let md = String::from_utf8_lossy(&out.stdout);
    assert!(md.contains("## Training runs") && md.contains("## Adaptation wall-clock"));
    assert!(run.join("summary.md").exists() && run.join("summary.json").exists());
}

#[test]
fn same_seed_gives_identical_metrics_bytes() {
    let (dir, cfg) = setup();
    let root = dir.path();
    for out in ["a", "b"] {
        ok(&flap(
            root,
            &["train", "--config", &cfg, "--seed", "5", "--out", out],
        ));
    }
    let read = |d: &str| {
        strip_columns(
            &fs::read_to_string(root.join(d).join("metrics.csv")).unwrap(),
            &WALL_CLOCK_COLUMNS,
        )
    };
    assert_eq!(read("a"), read("b"));
    ok(&flap(
        root,
        &["train", "--config", &cfg, "--seed", "6", "--out", "c"],
    ));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn ablation_writes_rows_per_seed() {
    let (dir, cfg) = setup();
    let root = dir.path();
    ok(&flap(
        root,
        &["ablate", "sas-input", "--config", &cfg, "--seeds", "0,1"],
    ));
    let rows = flap::metrics::read_ablation(&root.join("ablate-sas-input/ablation.csv")).unwrap();
    assert!(rows.iter().any(|r| r.seed == 0) && rows.iter().any(|r| r.seed == 1));
    assert!(rows
        .iter()
        .any(|r| r.variant == "sas" && r.metric == "heldout_mse"));
}

#[test]
fn errors_map_to_exit_codes() {
    let (dir, cfg) = setup();
    let root = dir.path();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(
        code(flap(root, &["train", "--config", &cfg, "--set", "nope=1"])),
        2
    );
    assert_eq!(
        code(flap(
            root,
            &["train", "--config", &cfg, "--set", "iterations=-1"]
        )),
        2
    );
    assert_eq!(
        code(flap(
            root,
            &[
                "train",
                "--config",
                &cfg,
                "--set",
                "steps_per_task_per_iteration=7"
            ]
        )),
        2
    );
    assert_eq!(code(flap(root, &["ablate", "bogus"])), 2);
    let missing = root.join("missing.json");
    assert_eq!(
        code(flap(
            root,
            &["adapt", "--checkpoint", missing.to_str().unwrap()]
        )),
        3
    );
    let bad = root.join("bad.json");
    fs::write(&bad, "{\"format_version\": 99}").unwrap();
    let out = flap(root, &["adapt", "--checkpoint", bad.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 99"));
    assert_eq!(code(out), 4);
}
