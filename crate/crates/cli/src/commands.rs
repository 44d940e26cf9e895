//! Implementations behind the CLI subcommands. Each returns a summary the
//! binary prints; every artifact is written atomically and every command is
//! deterministic for a fixed seed and inputs (bench timings excepted).

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{Precision, RunConfig};
use crate::formats::{
    self, box_record, scene_to_cloud_record, BoxRecord, CloudRecord, Manifest,
    ManifestUnits, Split, Splits,
};
use crate::CliError;
use ptrefine_core::encoding::AnchorTable;
use ptrefine_core::metrics::{self, Detection, EvalReport, EvalSpec, GroundTruth, Integration};
use ptrefine_core::network::Scalar;
use ptrefine_core::synthetic::{self, AmbiguityStats};
use ptrefine_core::trainer::{self, LossRecord, RefineOptions, TrainDataset, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ptrefine_core::trainer::BenchReport;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REFINED_FILE: &str = "refined.jsonl";

fn echo_config(out_dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    formats::write_atomic(&out_dir.join(EFFECTIVE_CONFIG_FILE), config.to_toml().as_bytes())
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub scenes: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub gt_boxes: usize,
    pub proposals: usize,
    pub objects_requested: usize,
    pub objects_placed: usize,
}

/// Generates a dataset: scenes, ground truth, corrupted proposals, manifest
/// with splits and the data-derived anchor table.
pub fn cmd_generate(config: &RunConfig, out_dir: &Path) -> Result<GenerateSummary, CliError> {
    let scene_config = config.scene_config();
    scene_config.validate()?;
    let noise = config.dataset.proposal_noise.into();

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.dataset.scenes);
    let mut proposals: Vec<Vec<trainer::Proposal>> = Vec::with_capacity(config.dataset.scenes);
    let mut requested = 0;
    let mut placed = 0;
    for frame in 0..config.dataset.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let (scene, stats) = synthetic::generate_scene(&scene_config, frame as u64, &mut rng)?;
        let props = synthetic::make_proposals(
            &scene,
            &scene_config,
            &mut rng,
            &noise,
            config.dataset.fp_rate,
        );
        requested += stats.requested;
        placed += stats.placed;
        scenes.push(scene);
        proposals.push(props);
    }

    let n_val = ((config.dataset.scenes as f64) * config.dataset.val_fraction).round() as usize;
    let n_train = config.dataset.scenes - n_val;
    let splits = Splits {
        train: (0..n_train as u64).collect(),
        val: (n_train as u64..config.dataset.scenes as u64).collect(),
    };

    // anchors: per-class mean gt size over the training split
    let class_names = config.class_names();
    let mut sums = vec![[0.0f64; 3]; class_names.len()];
    let mut counts = vec![0usize; class_names.len()];
    for scene in &scenes[..n_train] {
        for &(b, class) in &scene.gts {
            sums[class - 1][0] += b.w;
            sums[class - 1][1] += b.l;
            sums[class - 1][2] += b.h;
            counts[class - 1] += 1;
        }
    }
    let mut anchors = BTreeMap::new();
    for (i, name) in class_names.iter().enumerate() {
        let dims = if counts[i] > 0 {
            [
                sums[i][0] / counts[i] as f64,
                sums[i][1] / counts[i] as f64,
                sums[i][2] / counts[i] as f64,
            ]
        } else {
            // class absent from the training split: fall back to its
            // configured mean size
            config.scene.classes[i].size_mean
        };
        anchors.insert(name.clone(), dims);
    }

    let manifest = Manifest {
        format_version: formats::FORMAT_VERSION,
        units: ManifestUnits::default(),
        classes: class_names.clone(),
        iou_thresholds: config.iou_thresholds(),
        anchors,
        splits,
        sensor: config.scene.sensor,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    let cloud_records: Vec<CloudRecord> = scenes.iter().map(scene_to_cloud_record).collect();
    formats::write_jsonl(&out_dir.join(formats::CLOUDS_FILE), &cloud_records)?;

    let mut gt_records = Vec::new();
    for scene in &scenes {
        for &(b, class) in &scene.gts {
            gt_records.push(box_record(scene.frame_id, &class_names[class - 1], &b, None));
        }
    }
    formats::write_jsonl(&out_dir.join(formats::GT_FILE), &gt_records)?;

    let mut prop_records = Vec::new();
    for (scene, props) in scenes.iter().zip(&proposals) {
        for p in props {
            prop_records.push(box_record(
                scene.frame_id,
                &class_names[p.class - 1],
                &p.box7,
                Some(p.score),
            ));
        }
    }
    formats::write_jsonl(&out_dir.join(formats::PROPOSALS_FILE), &prop_records)?;
    formats::write_manifest(out_dir, &manifest)?;
    echo_config(out_dir, config)?;

    Ok(GenerateSummary {
        scenes: scenes.len(),
        train_frames: n_train,
        val_frames: n_val,
        gt_boxes: gt_records.len(),
        proposals: prop_records.len(),
        objects_requested: requested,
        objects_placed: placed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub final_total_loss: f64,
    pub final_cls_loss: f64,
    pub final_reg_loss: f64,
    pub checkpoint: PathBuf,
    pub param_count: usize,
}

fn log_line(record: &LossRecord) -> String {
    format!(
        "{{\"iteration\":{},\"epoch\":{},\"lr\":{},\"cls_loss\":{},\"reg_loss\":{},\"total\":{}}}",
        record.iteration, record.epoch, record.lr, record.cls_loss, record.reg_loss, record.total
    )
}

/// Trains on the dataset's train split; checkpoints every epoch and rewrites
/// the structured loss log atomically as it grows.
pub fn cmd_train(
    config: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    match config.precision().map_err(CliError::Schema)? {
        Precision::F64 => run_train::<f64>(config, dataset_dir, out_dir, resume),
        Precision::F32 => run_train::<f32>(config, dataset_dir, out_dir, resume),
    }
}

fn run_train<P: Scalar>(
    config: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    let dataset = formats::load_dataset(dataset_dir)?;
    if dataset.manifest.classes.len() != config.scene.classes.len() {
        return Err(CliError::Schema(format!(
            "config defines {} classes but the dataset manifest has {}",
            config.scene.classes.len(),
            dataset.manifest.classes.len()
        )));
    }
    let anchors = dataset.anchor_table()?;
    let train_config = config.train_config(anchors)?;
    let digest = config.digest();

    let resume_state: Option<TrainState<P>> = match resume {
        None => None,
        Some(path) => {
            let (state, meta) = checkpoint::load::<P>(path)?;
            if meta.config_digest != digest {
                return Err(CliError::Schema(format!(
                    "{}: checkpoint was trained with a different config",
                    path.display()
                )));
            }
            Some(state)
        }
    };

    let indices = dataset.split_indices(Split::Train);
    let data = TrainDataset {
        scenes: indices.iter().map(|&i| dataset.scenes[i].clone()).collect(),
        proposals: indices.iter().map(|&i| dataset.proposals[i].clone()).collect(),
    };

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    echo_config(out_dir, config)?;

    let meta = CheckpointMeta {
        precision: config.precision().map_err(CliError::Schema)?,
        encoder: train_config.encoder.clone(),
        num_classes: train_config.num_classes,
        channels: train_config.channels.clone(),
        momentum: train_config.momentum,
        weight_decay: train_config.weight_decay,
        config_digest: digest,
    };

    let mut callback_error: Option<CliError> = None;
    let mut log_so_far: Vec<String> = Vec::new();
    let run = trainer::train::<P>(&data, &train_config, resume_state, |state, epoch_log| {
        if callback_error.is_some() {
            return;
        }
        let mut write = || -> Result<(), CliError> {
            let epoch_path = out_dir.join(format!("checkpoint-epoch-{:03}.bin", state.epoch));
            checkpoint::save(&epoch_path, state, &meta)?;
            for r in epoch_log {
                log_so_far.push(log_line(r));
            }
            let mut text = log_so_far.join("\n");
            text.push('\n');
            formats::write_atomic(&out_dir.join(TRAIN_LOG_FILE), text.as_bytes())
        };
        if let Err(e) = write() {
            callback_error = Some(e);
        }
    })?;
    if let Some(e) = callback_error {
        return Err(e);
    }

    let final_path = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&final_path, &run.state, &meta)?;

    let last = run.log.last().cloned().unwrap_or(LossRecord {
        iteration: run.state.iteration,
        epoch: run.state.epoch,
        lr: 0.0,
        cls_loss: 0.0,
        reg_loss: 0.0,
        total: 0.0,
    });
    Ok(TrainSummary {
        steps: run.state.iteration,
        epochs: run.state.epoch,
        final_total_loss: last.total,
        final_cls_loss: last.cls_loss,
        final_reg_loss: last.reg_loss,
        checkpoint: final_path,
        param_count: run.state.model.num_params(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineSummary {
    pub frames: usize,
    pub records: usize,
    pub empty_crops: usize,
    pub output: PathBuf,
}

/// Rescent proposals of a split through a trained checkpoint, writing one
/// refined record per input proposal.
pub fn cmd_refine(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
    split: Split,
    seed: u64,
    batch: usize,
    empty_passthrough: bool,
) -> Result<RefineSummary, CliError> {
    match checkpoint::peek_precision(checkpoint_path)? {
        Precision::F64 => run_refine::<f64>(
            checkpoint_path,
            dataset_dir,
            out_dir,
            split,
            seed,
            batch,
            empty_passthrough,
        ),
        Precision::F32 => run_refine::<f32>(
            checkpoint_path,
            dataset_dir,
            out_dir,
            split,
            seed,
            batch,
            empty_passthrough,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_refine<P: Scalar>(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
    split: Split,
    seed: u64,
    batch: usize,
    empty_passthrough: bool,
) -> Result<RefineSummary, CliError> {
    let (state, meta) = checkpoint::load::<P>(checkpoint_path)?;
    let dataset = formats::load_dataset(dataset_dir)?;
    if dataset.manifest.classes.len() != meta.num_classes {
        return Err(CliError::Schema(format!(
            "checkpoint expects {} classes, dataset manifest has {}",
            meta.num_classes,
            dataset.manifest.classes.len()
        )));
    }

    let options = RefineOptions {
        seed,
        batch,
        empty_passthrough,
    };
    let mut records: Vec<BoxRecord> = Vec::new();
    let mut empty_crops = 0usize;
    let mut frames = 0usize;
    for &i in &dataset.split_indices(split) {
        let scene = &dataset.scenes[i];
        let props = &dataset.proposals[i];
        if props.is_empty() {
            continue;
        }
        frames += 1;
        let refined = trainer::refine(&state.model, &meta.encoder, &scene.cloud, props, &options)?;
        for (r, p) in refined.iter().zip(props) {
            // a background call keeps the proposal's class label on record
            let class_name = if r.class >= 1 {
                &dataset.manifest.classes[r.class - 1]
            } else {
                &dataset.manifest.classes[p.class - 1]
            };
            let mut record = box_record(scene.frame_id, class_name, &r.box7, Some(r.score));
            record.empty_crop = r.empty;
            if r.empty {
                empty_crops += 1;
            }
            records.push(record);
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    let out = out_dir.join(REFINED_FILE);
    formats::write_jsonl(&out, &records)?;
    Ok(RefineSummary {
        frames,
        records: records.len(),
        empty_crops,
        output: out,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub detections: usize,
    pub ground_truths: usize,
    pub report_json: PathBuf,
    pub report_text: PathBuf,
}

/// Evaluates a detections file against a dataset split, writing the grid as
/// a text table and a flat key/value JSON file.
pub fn cmd_eval(
    detections_path: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
    split: Split,
    spec_overrides: impl FnOnce(&mut EvalSpec),
) -> Result<(EvalSummary, EvalReport), CliError> {
    let dataset = formats::load_dataset(dataset_dir)?;
    let records: Vec<BoxRecord> = formats::read_jsonl(detections_path)?;

    let mut spec = EvalSpec {
        iou_thresholds: dataset.manifest.iou_thresholds.clone(),
        sensor_origin: [dataset.manifest.sensor[0], dataset.manifest.sensor[1]],
        ..EvalSpec::default()
    };
    spec_overrides(&mut spec);

    let indices = dataset.split_indices(split);
    let frame_ok: std::collections::BTreeSet<u64> =
        indices.iter().map(|&i| dataset.scenes[i].frame_id).collect();

    let mut detections = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let class = dataset.class_id(&r.class).ok_or_else(|| {
            CliError::Schema(format!(
                "{}:{}: unknown class `{}`",
                detections_path.display(),
                i + 1,
                r.class
            ))
        })?;
        let score = r.score.ok_or_else(|| {
            CliError::Schema(format!(
                "{}:{}: detection record lacks a score",
                detections_path.display(),
                i + 1
            ))
        })?;
        if !frame_ok.contains(&r.frame) {
            return Err(CliError::Schema(format!(
                "{}:{}: frame {} is not part of the evaluated split",
                detections_path.display(),
                i + 1,
                r.frame
            )));
        }
        let [x, y, z, w, l, h, theta] = r.r#box;
        let box7 = ptrefine_core::geometry::Box7::new(x, y, z, w, l, h, theta)
            .map_err(|e| CliError::Schema(format!("{}:{}: {e}", detections_path.display(), i + 1)))?;
        detections.push(Detection {
            frame: r.frame,
            box7,
            score,
            class,
        });
    }

    let mut gts = Vec::new();
    let mut clouds = Vec::new();
    for &i in &indices {
        let scene = &dataset.scenes[i];
        clouds.push(scene.cloud.clone());
        for &(b, class) in &scene.gts {
            gts.push(GroundTruth {
                frame: scene.frame_id,
                box7: b,
                class,
            });
        }
    }

    let report = metrics::evaluate(&detections, &gts, &clouds, &spec)?;

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    let text = render_report(&dataset.manifest.classes, &report);
    let text_path = out_dir.join("report.txt");
    formats::write_atomic(&text_path, text.as_bytes())?;

    let mut kv = BTreeMap::new();
    for cell in &report.cells {
        let class = &dataset.manifest.classes[cell.class - 1];
        let base = format!("{}/{}/{}", class, cell.level.name(), cell.range_label());
        kv.insert(format!("{base}/AP"), serde_json::json!(cell.ap));
        kv.insert(format!("{base}/APH"), serde_json::json!(cell.aph));
        kv.insert(format!("{base}/num_gt"), serde_json::json!(cell.num_gt));
        kv.insert(
            format!("{base}/num_detections"),
            serde_json::json!(cell.num_detections),
        );
    }
    let json = serde_json::json!({
        "spec": {
            "iou_thresholds": spec.iou_thresholds,
            "level1_min_points": spec.level1_min_points,
            "level2_min_points": spec.level2_min_points,
            "match_bev": spec.match_bev,
            "integration": match spec.integration {
                metrics::Integration::Continuous => 0usize,
                metrics::Integration::Interpolated(n) => n,
            },
        },
        "cells": kv,
        "warnings": report.warnings,
    });
    let json_path = out_dir.join("report.json");
    formats::write_atomic(
        &json_path,
        serde_json::to_string_pretty(&json).expect("report serializes").as_bytes(),
    )?;

    Ok((
        EvalSummary {
            detections: detections.len(),
            ground_truths: gts.len(),
            report_json: json_path,
            report_text: text_path,
        },
        report,
    ))
}

/// Fixed-width text table over the class x level x range grid.
pub fn render_report(class_names: &[String], report: &EvalReport) -> String {
    let mut out = String::new();
    let ranges: Vec<String> = {
        let mut seen = Vec::new();
        for c in &report.cells {
            let label = c.range_label();
            if !seen.contains(&label) {
                seen.push(label);
            }
        }
        seen
    };
    out.push_str(&format!("{:<12} {:<8} {:<7}", "class", "level", "metric"));
    for r in &ranges {
        out.push_str(&format!(" {r:>9}"));
    }
    out.push('\n');
    for (ci, class) in class_names.iter().enumerate() {
        for level in [metrics::Level::Level1, metrics::Level::Level2] {
            for metric in ["AP", "APH"] {
                out.push_str(&format!("{class:<12} {:<8} {metric:<7}", level.name()));
                for r in &ranges {
                    let cell = report
                        .cells
                        .iter()
                        .find(|c| c.class == ci + 1 && c.level == level && c.range_label() == *r);
                    match cell {
                        Some(c) => {
                            let v = if metric == "AP" { c.ap } else { c.aph };
                            out.push_str(&format!(" {:>9.4}", v));
                        }
                        None => out.push_str(&format!(" {:>9}", "-")),
                    }
                }
                out.push('\n');
            }
        }
    }
    if !report.warnings.is_empty() {
        out.push('\n');
        for w in &report.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AmbiguitySummary {
    pub split: String,
    pub enlarge_wl: f64,
    pub proposals: usize,
    pub frac_same_count: f64,
    pub frac_lt_10_new: f64,
}

/// Counts per-proposal point gains under width/length enlargement.
pub fn cmd_ambiguity(
    dataset_dir: &Path,
    enlarge_wl: f64,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<AmbiguitySummary, CliError> {
    let dataset = formats::load_dataset(dataset_dir)?;
    let indices = dataset.split_indices(split);
    let scenes: Vec<_> = indices.iter().map(|&i| dataset.scenes[i].clone()).collect();
    let proposals: Vec<_> = indices.iter().map(|&i| dataset.proposals[i].clone()).collect();
    let stats: AmbiguityStats = synthetic::ambiguity_study(&scenes, &proposals, enlarge_wl)?;
    let summary = AmbiguitySummary {
        split: match split {
            Split::Train => "train".into(),
            Split::Val => "val".into(),
            Split::All => "all".into(),
        },
        enlarge_wl,
        proposals: stats.total,
        frac_same_count: stats.frac_same_count,
        frac_lt_10_new: stats.frac_lt_10_new,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        formats::write_atomic(
            &dir.join("ambiguity.json"),
            serde_json::to_string_pretty(&summary)
                .expect("summary serializes")
                .as_bytes(),
        )?;
    }
    Ok(summary)
}

/// Times the forward pass across sampled point counts at a fixed batch.
pub fn cmd_bench(
    checkpoint_path: &Path,
    points: &[usize],
    batch: usize,
    runs: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<BenchReport, CliError> {
    let report = match checkpoint::peek_precision(checkpoint_path)? {
        Precision::F64 => {
            let (state, meta) = checkpoint::load::<f64>(checkpoint_path)?;
            trainer::bench(&state.model, meta.encoder.variant, points, batch, runs, seed)?
        }
        Precision::F32 => {
            let (state, meta) = checkpoint::load::<f32>(checkpoint_path)?;
            trainer::bench(&state.model, meta.encoder.variant, points, batch, runs, seed)?
        }
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        let json = serde_json::json!({
            "batch": report.batch,
            "runs": report.runs,
            "param_count": report.param_count,
            "rows": report.rows.iter().map(|r| serde_json::json!({
                "n_points": r.n_points,
                "median_seconds": r.median_seconds,
            })).collect::<Vec<_>>(),
        });
        formats::write_atomic(
            &dir.join("bench.json"),
            serde_json::to_string_pretty(&json).expect("bench serializes").as_bytes(),
        )?;
    }
    Ok(report)
}

/// Builds a fresh untrained checkpoint, mainly so `bench` can run without a
/// training pass.
pub fn cmd_init_checkpoint(config: &RunConfig, out_path: &Path) -> Result<(), CliError> {
    let anchors = AnchorTable::new(
        config.scene.classes.iter().map(|c| c.size_mean).collect(),
    )
    .map_err(|e| CliError::Schema(e.to_string()))?;
    let train_config = config.train_config(anchors)?;
    match config.precision().map_err(CliError::Schema)? {
        Precision::F64 => init_checkpoint::<f64>(config, &train_config, out_path),
        Precision::F32 => init_checkpoint::<f32>(config, &train_config, out_path),
    }
}

fn init_checkpoint<P: Scalar>(
    config: &RunConfig,
    train_config: &ptrefine_core::trainer::TrainConfig,
    out_path: &Path,
) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = ptrefine_core::network::init_model::<P>(
        &mut rng,
        &train_config.channels,
        train_config.encoder.channels(),
        train_config.num_classes,
    )
    .map_err(|e| CliError::Schema(e.to_string()))?;
    let opt = ptrefine_core::network::OptimizerState::new(
        &model,
        train_config.momentum,
        train_config.weight_decay,
    );
    let state = TrainState {
        model,
        opt,
        iteration: 0,
        epoch: 0,
        rng,
    };
    let meta = CheckpointMeta {
        precision: config.precision().map_err(CliError::Schema)?,
        encoder: train_config.encoder.clone(),
        num_classes: train_config.num_classes,
        channels: train_config.channels.clone(),
        momentum: train_config.momentum,
        weight_decay: train_config.weight_decay,
        config_digest: config.digest(),
    };
    checkpoint::save(out_path, &state, &meta)
}

/// Parses `--interp`/`--match-bev` style overrides into the eval spec.
pub fn apply_eval_section(spec: &mut EvalSpec, config: &RunConfig) {
    let section = config.eval_spec();
    spec.level1_min_points = section.level1_min_points;
    spec.level2_min_points = section.level2_min_points;
    spec.range_bins = section.range_bins;
    spec.match_bev = section.match_bev;
    spec.integration = section.integration;
}

pub fn integration_from_flag(n: usize) -> Integration {
    if n == 0 {
        Integration::Continuous
    } else {
        Integration::Interpolated(n)
    }
}
