//! End-to-end flows through the command layer: generate -> train -> refine
//! -> eval, plus format-level guarantees (determinism, schema diagnostics,
//! exit codes through the real binary).

use ptrefine::commands::{
    cmd_ambiguity, cmd_eval, cmd_generate, cmd_refine, cmd_train, CHECKPOINT_FILE,
    EFFECTIVE_CONFIG_FILE, TRAIN_LOG_FILE,
};
use ptrefine::config::RunConfig;
use ptrefine::formats::{self, BoxRecord, Split};
use std::path::Path;
use std::process::Command;
use tempfile::TempDir;

/// A config small enough for test-speed training but exercising the full
/// two-class pipeline.
fn small_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = 42;
    config.dataset.scenes = 15;
    config.dataset.val_fraction = 0.2;
    config.scene.points_base = 96;
    config.scene.area = [-20.0, 20.0, 4.0, 30.0];
    config.scene.classes[0].count = [1, 3];
    config.scene.classes[1].count = [1, 3];
    config.encoding.points_per_proposal = 32;
    config.train.epochs = 2;
    config.train.batch_size = 16;
    config.train.embed = vec![16, 16, 32];
    config
}

#[test]
fn generate_writes_a_complete_deterministic_dataset() {
    let dir = TempDir::new().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let config = small_config();

    let summary = cmd_generate(&config, &out_a).unwrap();
    assert_eq!(summary.scenes, 15);
    assert_eq!(summary.train_frames, 12);
    assert_eq!(summary.val_frames, 3, "val fraction 0.2 of 15 frames");

    // one cloud record per scene
    let clouds: Vec<ptrefine::formats::CloudRecord> =
        formats::read_jsonl(&out_a.join(formats::CLOUDS_FILE)).unwrap();
    assert_eq!(clouds.len(), 15);

    // a loadable, cross-validated dataset with anchors for every class
    let dataset = formats::load_dataset(&out_a).unwrap();
    assert_eq!(dataset.scenes.len(), 15);
    assert_eq!(dataset.manifest.splits.val.len(), 3);
    let anchors = dataset.anchor_table().unwrap();
    assert_eq!(anchors.len(), 2);

    // byte-identical regeneration under the same seed
    cmd_generate(&config, &out_b).unwrap();
    for file in [
        formats::CLOUDS_FILE,
        formats::GT_FILE,
        formats::PROPOSALS_FILE,
        formats::MANIFEST_FILE,
        EFFECTIVE_CONFIG_FILE,
    ] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

fn train_once(config: &RunConfig, dataset: &Path, out: &Path) -> ptrefine::commands::TrainSummary {
    cmd_train(config, dataset, out, None).unwrap()
}

#[test]
fn train_refine_eval_roundtrip() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let config = small_config();
    cmd_generate(&config, &data_dir).unwrap();
    let dataset = formats::load_dataset(&data_dir).unwrap();

    let train_dir = dir.path().join("run");
    let summary = train_once(&config, &data_dir, &train_dir);
    assert!(train_dir.join(CHECKPOINT_FILE).exists());
    assert!(train_dir.join(TRAIN_LOG_FILE).exists());
    assert!(train_dir.join(EFFECTIVE_CONFIG_FILE).exists());
    assert!(train_dir.join("checkpoint-epoch-001.bin").exists());
    assert!(summary.final_total_loss.is_finite());

    // the loss log is strictly ordered by iteration and carries the lr
    let log = std::fs::read_to_string(train_dir.join(TRAIN_LOG_FILE)).unwrap();
    let mut last_iter = 0u64;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let iter = v["iteration"].as_u64().unwrap();
        assert!(iter > last_iter);
        last_iter = iter;
        assert!(v["lr"].as_f64().unwrap() >= 0.0);
        for key in ["cls_loss", "reg_loss", "total", "epoch"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(last_iter, summary.steps);

    // refine the val split: one record per input proposal, schema-compatible
    let refine_dir = dir.path().join("refined");
    let refined = cmd_refine(
        &train_dir.join(CHECKPOINT_FILE),
        &data_dir,
        &refine_dir,
        Split::Val,
        0,
        128,
        false,
    )
    .unwrap();
    let val_props: usize = dataset
        .split_indices(Split::Val)
        .iter()
        .map(|&i| dataset.proposals[i].len())
        .sum();
    assert_eq!(refined.records, val_props);
    let records: Vec<BoxRecord> = formats::read_jsonl(&refine_dir.join("refined.jsonl")).unwrap();
    assert_eq!(records.len(), val_props);
    for r in &records {
        assert!(r.score.is_some());
        let [.., w, l, h, theta] = {
            let b = r.r#box;
            [b[0], b[1], b[2], b[3], b[4], b[5], b[6]]
        };
        let _ = theta;
        assert!(w > 0.0 && l > 0.0 && h > 0.0);
        assert!(r.r#box.iter().all(|v| v.is_finite()));
    }

    // evaluating the refined output runs end to end
    let eval_dir = dir.path().join("eval");
    let (eval_summary, report) = cmd_eval(
        &refine_dir.join("refined.jsonl"),
        &data_dir,
        &eval_dir,
        Split::Val,
        |_| {},
    )
    .unwrap();
    assert_eq!(eval_summary.detections, val_props);
    assert!(!report.cells.is_empty());
    let text = std::fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    assert!(text.contains("LEVEL_1") && text.contains("LEVEL_2"));
    assert!(text.contains("0-30m") && text.contains("30-50m") && text.contains("50m-Inf"));
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let mut config = small_config();
    // plenty of points so every gt clears LEVEL_1 on the val split
    config.scene.points_base = 200;
    config.scene.min_points = 6;
    config.scene.occlusion_prob = 0.0;
    cmd_generate(&config, &data_dir).unwrap();
    let dataset = formats::load_dataset(&data_dir).unwrap();

    // copy the val gts into a detections file with perfect scores
    let mut detections = Vec::new();
    for &i in &dataset.split_indices(Split::Val) {
        let scene = &dataset.scenes[i];
        for &(b, class) in &scene.gts {
            detections.push(ptrefine::formats::box_record(
                scene.frame_id,
                &dataset.manifest.classes[class - 1],
                &b,
                Some(1.0),
            ));
        }
    }
    let det_path = dir.path().join("dets.jsonl");
    formats::write_jsonl(&det_path, &detections).unwrap();

    let eval_dir = dir.path().join("eval");
    let (_, report) = cmd_eval(&det_path, &data_dir, &eval_dir, Split::Val, |_| {}).unwrap();
    for cell in &report.cells {
        if cell.num_gt > 0 {
            assert_eq!(cell.ap, 1.0, "{cell:?}");
            assert_eq!(cell.aph, 1.0, "{cell:?}");
        }
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    assert!(json["cells"].as_object().unwrap().len() >= 2 * 2 * 4 * 2);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let mut config = small_config();
    config.train.epochs = 3;
    cmd_generate(&config, &data_dir).unwrap();

    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    train_once(&config, &data_dir, &run_a);
    train_once(&config, &data_dir, &run_b);
    let bytes_a = std::fs::read(run_a.join(CHECKPOINT_FILE)).unwrap();
    let bytes_b = std::fs::read(run_b.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must give bit-identical checkpoints");

    // resume from the epoch-1 checkpoint and land on the same bytes
    let resumed_dir = dir.path().join("resumed");
    cmd_train(
        &config,
        &data_dir,
        &resumed_dir,
        Some(&run_a.join("checkpoint-epoch-001.bin")),
    )
    .unwrap();
    let resumed = std::fs::read(resumed_dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bytes_a, resumed, "resume must reproduce the uninterrupted run");
}

#[test]
fn resume_rejects_mismatched_config() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let config = small_config();
    cmd_generate(&config, &data_dir).unwrap();
    let run = dir.path().join("run");
    train_once(&config, &data_dir, &run);

    let mut other = config.clone();
    other.train.lr0 = 0.01;
    let err = cmd_train(
        &other,
        &data_dir,
        &dir.path().join("x"),
        Some(&run.join(CHECKPOINT_FILE)),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("different config"), "{err}");
}

#[test]
fn refine_records_flag_empty_crops() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let config = small_config();
    cmd_generate(&config, &data_dir).unwrap();

    // plant a far-away proposal in the val split that crops nothing
    let prop_path = data_dir.join(formats::PROPOSALS_FILE);
    let mut records: Vec<BoxRecord> = formats::read_jsonl(&prop_path).unwrap();
    let dataset = formats::load_dataset(&data_dir).unwrap();
    let val_frame = dataset.manifest.splits.val[0];
    records.push(BoxRecord {
        frame: val_frame,
        class: "vehicle".into(),
        r#box: [500.0, 500.0, 1.0, 1.9, 4.6, 1.7, 0.0],
        score: Some(0.8),
        empty_crop: false,
    });
    formats::write_jsonl(&prop_path, &records).unwrap();

    let run = dir.path().join("run");
    train_once(&config, &data_dir, &run);
    let refine_dir = dir.path().join("refined");
    let summary = cmd_refine(
        &run.join(CHECKPOINT_FILE),
        &data_dir,
        &refine_dir,
        Split::Val,
        0,
        128,
        false,
    )
    .unwrap();
    assert!(summary.empty_crops >= 1);
    let refined: Vec<BoxRecord> = formats::read_jsonl(&refine_dir.join("refined.jsonl")).unwrap();
    let planted: Vec<&BoxRecord> = refined.iter().filter(|r| r.empty_crop).collect();
    assert!(!planted.is_empty());
    for r in planted {
        assert_eq!(r.score, Some(0.0), "empty crops rescore as background");
    }
}

#[test]
fn ambiguity_command_reports_fractions() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let config = small_config();
    cmd_generate(&config, &data_dir).unwrap();
    let out = dir.path().join("amb");
    let summary = cmd_ambiguity(&data_dir, 1.0, Split::All, Some(&out)).unwrap();
    assert!(summary.proposals > 0);
    assert!((0.0..=1.0).contains(&summary.frac_same_count));
    assert!((0.0..=1.0).contains(&summary.frac_lt_10_new));
    assert!(summary.frac_same_count + summary.frac_lt_10_new <= 1.0);
    assert!(out.join("ambiguity.json").exists());
}

/// Exit codes through the real binary: 2 for schema, 4 for I/O.
#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ptrefine");
    let dir = TempDir::new().unwrap();

    // unreadable config path: I/O
    let status = Command::new(bin)
        .args([
            "generate",
            "--config",
            "/nonexistent/config.toml",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));

    // malformed config: schema, before any work starts
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 1\n[bogus]\nkey = true\n").unwrap();
    let output = Command::new(bin)
        .args([
            "generate",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("y").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("bogus"));
    assert!(!dir.path().join("y").exists(), "no output before validation");

    // clap usage errors are also schema-class failures
    let status = Command::new(bin).arg("frobnicate").status().unwrap();
    assert_eq!(status.code(), Some(2));

    // a working invocation exits zero
    let status = Command::new(bin)
        .args([
            "generate",
            "--out",
            dir.path().join("ok").to_str().unwrap(),
            "--scenes",
            "3",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}
