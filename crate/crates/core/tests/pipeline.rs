use std::collections::BTreeSet;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use iuf_core::cli;
use iuf_core::data_synth::{load_mvtec_layout, Label, SplitCounts};
use iuf_core::error::Error;
use iuf_core::persist;
use iuf_core::trainer::{
    ablate, run_incremental, Component, DataSource, RunConfig, Split, UpdateRule,
};

fn small(protocol: &str, seed: u64) -> RunConfig {
    RunConfig {
        protocol: protocol.into(),
        seed,
        epochs: 2,
        batch_size: 4,
        heatmaps: false,
        data: DataSource::Synthetic {
            objects: None,
            counts: SplitCounts {
                n_train: 6,
                n_test_normal: 3,
                n_test_defective: 3,
            },
        },
        ..RunConfig::default()
    }
}

#[test]
fn three_plus_one_grows_the_score_matrix() {
    let out = run_incremental(&small("3-1", 1), None).unwrap();
    let lens: Vec<usize> = out.scores.rows.iter().map(Vec::len).collect();
    assert_eq!(lens, vec![3, 4]);
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.records[1].objects, vec![3]);
    for entry in &out.train_log {
        let want = if entry.step == 1 {
            UpdateRule::Vanilla
        } else {
            UpdateRule::Reinforced
        };
        assert_eq!(entry.rule, want);
    }
    let s = iuf_core::trainer::summarize(&out.scores);
    assert!(s.pixel.acc.is_some() && s.image.fm.is_some());
}

#[test]
fn without_us_every_update_is_vanilla() {
    let cfg = ablate(&small("1-1", 2), Component::Us);
    let out = run_incremental(&cfg, None).unwrap();
    assert!(out.train_log.iter().all(|e| e.rule == UpdateRule::Vanilla));
}

#[test]
fn training_only_reads_the_current_step_and_evaluation_only_test_data() {
    let cfg = small("2-1-1", 3);
    let out = run_incremental(&cfg, None).unwrap();
    let plan = [vec![0, 1], vec![2], vec![3]];
    for a in &out.accesses {
        match a.split {
            Split::Train => {
                assert!(plan[a.step - 1].contains(&a.object_id), "{a:?}");
                assert_eq!(a.label, Label::Normal);
            }
            Split::Test => {
                let seen: Vec<usize> = plan[..a.step].concat();
                assert!(seen.contains(&a.object_id), "{a:?}");
            }
        }
    }
    let test_reads: BTreeSet<(usize, usize)> = out
        .accesses
        .iter()
        .filter(|a| a.split == Split::Test)
        .map(|a| (a.step, a.object_id))
        .collect();
    assert!(test_reads.contains(&(3, 0)));
}

#[test]
fn ablation_is_idempotent_and_targets_one_component() {
    let base = RunConfig::default();
    for c in [Component::Oasa, Component::Scl, Component::Us] {
        let once = ablate(&base, c);
        assert_eq!(once, ablate(&once, c));
        assert_eq!(once.ablation.names(), vec![c.to_string()]);
    }
    assert_eq!(ablate(&base, Component::Scl).loss.lambda2, 0.0);
    assert_eq!(ablate(&base, Component::Us).update.beta, 0.0);
    assert_eq!(ablate(&base, Component::Oasa).loss, base.loss);
}

#[test]
fn runs_are_reproducible_and_re_evaluation_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("1-1", 4);
    cfg.heatmaps = true;
    cfg.out_dir = tmp.path().join("run");
    cli::train_into(&cfg).unwrap();
    let root = &cfg.out_dir;

    let manifest = persist::read_run_manifest(root).unwrap();
    let on_disk = persist::inventory(root).unwrap();
    assert_eq!(manifest.files, on_disk);
    assert!(on_disk.iter().any(|f| f.ends_with(".png")));
    assert!(
        on_disk.contains(&"step_2/checkpoint/params.bin".to_string()),
        "{on_disk:?}"
    );

    let metrics = std::fs::read(root.join("metrics.csv")).unwrap();
    let heatmaps: Vec<(String, Vec<u8>)> = on_disk
        .iter()
        .filter(|f| f.ends_with(".png"))
        .map(|f| (f.clone(), std::fs::read(root.join(f)).unwrap()))
        .collect();
    for step in [1, 2] {
        cli::cmd_eval(root, step).unwrap();
    }
    assert_eq!(metrics, std::fs::read(root.join("metrics.csv")).unwrap());
    for (f, bytes) in heatmaps {
        assert_eq!(bytes, std::fs::read(root.join(&f)).unwrap(), "{f}");
    }

    match cli::cmd_eval(root, 3) {
        Err(e @ Error::Config { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected config error, got {other:?}"),
    }
    std::fs::remove_dir_all(root.join("step_1").join("checkpoint")).unwrap();
    assert_eq!(cli::cmd_eval(root, 1).unwrap_err().exit_code(), 2);
}

#[test]
fn report_compares_runs_of_one_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, cfg) in [
        ("full", small("1-1", 5)),
        ("wo_us", ablate(&small("1-1", 5), Component::Us)),
        ("other", small("2", 5)),
    ] {
        let mut cfg = cfg;
        cfg.out_dir = tmp.path().join(name);
        cli::train_into(&cfg).unwrap();
        dirs.push(cfg.out_dir);
    }
    let cmp = cli::compare(&dirs[..2]).unwrap();
    assert_eq!(cmp.protocol, "1-1");
    let labels: Vec<&str> = cmp.runs.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, vec!["full", "w/o us"]);
    let table = cli::render_table(
        &cmp.protocol,
        &[("full".into(), cmp.runs[0].summary.clone())],
    );
    assert_eq!(table.lines().count(), 5);

    let out = tmp.path().join("summary.json");
    cli::cmd_report(&dirs[..2], Some(&out)).unwrap();
    assert!(out.exists());
    assert_eq!(cli::compare(&dirs).unwrap_err().exit_code(), 2);
    assert_eq!(cli::compare(&[]).unwrap_err().exit_code(), 2);
}

fn write_object(root: &Path, name: &str, shade: u8, with_mask: bool) {
    let obj = root.join(name);
    for d in [
        "train/good",
        "test/good",
        "test/crack",
        "ground_truth/crack",
    ] {
        std::fs::create_dir_all(obj.join(d)).unwrap();
    }
    let plain = RgbImage::from_fn(32, 32, |x, y| Rgb([shade, (x * 4) as u8, (y * 4) as u8]));
    for i in 0..4 {
        plain
            .save(obj.join(format!("train/good/{i:03}.png")))
            .unwrap();
    }
    plain.save(obj.join("test/good/000.png")).unwrap();
    let mut cracked = plain.clone();
    for x in 8..24 {
        cracked.put_pixel(x, 16, Rgb([255, 255, 255]));
    }
    cracked.save(obj.join("test/crack/000.png")).unwrap();
    if with_mask {
        let mask = GrayImage::from_fn(32, 32, |x, y| {
            Luma([if y == 16 && (8..24).contains(&x) {
                255
            } else {
                0
            }])
        });
        mask.save(obj.join("ground_truth/crack/000_mask.png"))
            .unwrap();
    }
}

#[test]
fn folder_layout_is_ingested_and_trainable() {
    let tmp = tempfile::tempdir().unwrap();
    write_object(tmp.path(), "bottle", 40, true);
    write_object(tmp.path(), "cable", 200, true);
    let objects = load_mvtec_layout(tmp.path(), 64).unwrap();
    assert_eq!(objects.len(), 2);
    assert_eq!(objects[1].name, "cable");
    assert_eq!(objects[0].train.len(), 4);
    let defective = objects[0]
        .test
        .iter()
        .find(|s| s.label == Label::Defective)
        .unwrap();
    assert!(defective.mask.iter().any(|&m| m == 1));
    assert_eq!(defective.image.shape(), &[3, 64, 64]);

    let cfg = RunConfig {
        data: DataSource::Mvtec {
            root: tmp.path().to_path_buf(),
        },
        ..small("1-1", 6)
    };
    let out = run_incremental(&cfg, None).unwrap();
    assert_eq!(out.scores.rows[1].len(), 2);

    write_object(tmp.path(), "carpet", 90, false);
    assert!(matches!(
        load_mvtec_layout(tmp.path(), 64),
        Err(Error::Ingestion { .. })
    ));
}
