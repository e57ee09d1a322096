use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "run.epochs=2\nrun.batch_size=4\nrun.heatmaps=false\ndata.n_train=6\ndata.n_test_normal=3\ndata.n_test_defective=3\n";

fn iuf(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iuf"))
        .args(args)
        .env("IUF_OUT", out_root)
        .output()
        .expect("spawn iuf")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_config_key_exits_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "run.seed=1\noptim.learning_rate=0.1\n").unwrap();
    let o = iuf(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.learning_rate"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = iuf(&["train", "--ablate", "attention"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ablate"));
    let o = iuf(&["train", "--protocol", "2-x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = iuf(&["report"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();

    let o = iuf(
        &["train", "--config", cfg, "--protocol", "3-1", "--seed", "7"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let full = tmp.path().join("3-1_seed7");
    let metrics = std::fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("step,object_id,pixel_auroc,image_auroc")
    );
    assert_eq!(metrics.lines().count(), 1 + 3 + 4);

    let o = iuf(
        &[
            "train",
            "--config",
            cfg,
            "--protocol",
            "3-1",
            "--seed",
            "7",
            "--ablate",
            "us",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let wo_us = tmp.path().join("3-1_seed7_wo-us");
    let manifest = std::fs::read_to_string(wo_us.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"us\""));
    let log = std::fs::read_to_string(wo_us.join("train_log.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| l.ends_with(",vanilla")));

    let o = iuf(
        &["eval", "--run", full.to_str().unwrap(), "--step", "2"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        metrics,
        std::fs::read_to_string(full.join("metrics.csv")).unwrap()
    );
    let o = iuf(
        &["eval", "--run", full.to_str().unwrap(), "--step", "3"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));

    let summary = tmp.path().join("cmp.json");
    let o = iuf(
        &[
            "report",
            full.to_str().unwrap(),
            wo_us.to_str().unwrap(),
            "--out",
            summary.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("w/o us") && table.contains("image FM"));
    assert!(summary.exists());

    let o = iuf(
        &["train", "--config", cfg, "--protocol", "1-1", "--seed", "7"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let other = tmp.path().join("1-1_seed7");
    let o = iuf(
        &["report", full.to_str().unwrap(), other.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("protocol"));
}
