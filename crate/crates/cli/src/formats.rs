//! Dataset files: line-delimited JSON records for clouds and boxes plus a
//! JSON manifest with splits, classes and the anchor table.
//!
//! Units are meters and radians throughout; `box` arrays are
//! `[x, y, z, w, l, h, theta]` with `l` along the heading. Every output is
//! written atomically (temp file + rename), never appended.

use crate::CliError;
use ptrefine_core::encoding::AnchorTable;
use ptrefine_core::geometry::{Box7, Point3, PointCloud};
use ptrefine_core::synthetic::Scene;
use ptrefine_core::trainer::Proposal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

pub const CLOUDS_FILE: &str = "clouds.jsonl";
pub const GT_FILE: &str = "gt_boxes.jsonl";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One frame of points. Each point is `[x, y, z, extra...]`; channels past
/// the third are carried opaquely.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CloudRecord {
    pub frame: u64,
    pub points: Vec<Vec<f64>>,
}

/// One box. Ground-truth files omit `score`; proposal and detection files
/// carry it. `empty_crop` marks refinement outputs whose crop held no
/// points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub frame: u64,
    pub class: String,
    /// `[x, y, z, w, l, h, theta]`.
    pub r#box: [f64; 7],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_crop: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Unit and axis conventions, stated for consumers in other languages.
    pub units: ManifestUnits,
    pub classes: Vec<String>,
    /// Per-class positive/matching IoU thresholds, parallel to `classes`.
    pub iou_thresholds: Vec<f64>,
    /// Per-class mean gt size `(w, l, h)` over the training split.
    pub anchors: BTreeMap<String, [f64; 3]>,
    pub splits: Splits,
    pub sensor: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestUnits {
    pub distance: String,
    pub angle: String,
    pub box_layout: String,
}

impl Default for ManifestUnits {
    fn default() -> Self {
        Self {
            distance: "meters".into(),
            angle: "radians".into(),
            box_layout: "[x, y, z, w, l, h, theta]; l along heading (canonical x), w lateral, h vertical; theta about +z in (-pi, pi]".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

/// A dataset loaded into core types. Scenes are keyed by frame id; class
/// ids are 1-based indices into `manifest.classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
    /// Per scene, parallel to `scenes`.
    pub proposals: Vec<Vec<Proposal>>,
    train_set: BTreeSet<u64>,
    val_set: BTreeSet<u64>,
}

impl Dataset {
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.manifest.classes.iter().position(|c| c == name).map(|i| i + 1)
    }

    pub fn anchor_table(&self) -> Result<AnchorTable, CliError> {
        let mut sizes = Vec::with_capacity(self.manifest.classes.len());
        for name in &self.manifest.classes {
            match self.manifest.anchors.get(name) {
                Some(dims) => sizes.push(*dims),
                None => {
                    return Err(CliError::Schema(format!(
                        "manifest anchors missing class `{name}`"
                    )))
                }
            }
        }
        AnchorTable::new(sizes).map_err(|e| CliError::Schema(e.to_string()))
    }

    /// Scene indices belonging to a split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let wanted: Option<&BTreeSet<u64>> = match split {
            Split::Train => Some(&self.train_set),
            Split::Val => Some(&self.val_set),
            Split::All => None,
        };
        self.scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| wanted.is_none_or(|w| w.contains(&s.frame_id)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            other => Err(format!("unknown split `{other}` (expected train, val or all)")),
        }
    }
}

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::io(dir.display(), e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path.display(), e))?;
    tmp.persist(path)
        .map_err(|e| CliError::io(path.display(), e.error))?;
    Ok(())
}

/// Serializes records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Parses one record per line, reporting the 1-based line on failure.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|e| {
            CliError::Schema(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Schema(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn validate_box(path: &Path, line: usize, b: &BoxRecord) -> Result<Box7, CliError> {
    let [x, y, z, w, l, h, theta] = b.r#box;
    Box7::new(x, y, z, w, l, h, theta).map_err(|e| {
        CliError::Schema(format!("{}:{}: invalid box: {e}", path.display(), line))
    })
}

fn cloud_from_record(path: &Path, line: usize, r: &CloudRecord) -> Result<PointCloud, CliError> {
    let mut points = Vec::with_capacity(r.points.len());
    let mut extras = Vec::new();
    let extra_width = r.points.first().map(|p| p.len().saturating_sub(3)).unwrap_or(0);
    for p in &r.points {
        if p.len() < 3 || p.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Schema(format!(
                "{}:{}: points need at least 3 finite coordinates",
                path.display(),
                line
            )));
        }
        if p.len() - 3 != extra_width {
            return Err(CliError::Schema(format!(
                "{}:{}: inconsistent extra channel count",
                path.display(),
                line
            )));
        }
        points.push(Point3::new(p[0], p[1], p[2]));
        if extra_width > 0 {
            extras.push(p[3..].to_vec());
        }
    }
    Ok(PointCloud {
        frame: r.frame,
        points,
        extras,
    })
}

/// Reads and cross-validates a dataset directory: every box must reference
/// an existing cloud frame and a known class.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::io(manifest_path.display(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Schema(format!(
            "{}: unsupported format_version {}",
            manifest_path.display(),
            manifest.format_version
        )));
    }
    if manifest.classes.len() != manifest.iou_thresholds.len() {
        return Err(CliError::Schema(format!(
            "{}: classes/iou_thresholds length mismatch",
            manifest_path.display()
        )));
    }

    let clouds_path = dir.join(CLOUDS_FILE);
    let cloud_records: Vec<CloudRecord> = read_jsonl(&clouds_path)?;
    let mut frame_index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut scenes: Vec<Scene> = Vec::with_capacity(cloud_records.len());
    for (i, r) in cloud_records.iter().enumerate() {
        if frame_index.insert(r.frame, i).is_some() {
            return Err(CliError::Schema(format!(
                "{}:{}: duplicate frame id {}",
                clouds_path.display(),
                i + 1,
                r.frame
            )));
        }
        scenes.push(Scene {
            frame_id: r.frame,
            cloud: cloud_from_record(&clouds_path, i + 1, r)?,
            gts: Vec::new(),
        });
    }

    let class_id = |path: &Path, line: usize, name: &str| -> Result<usize, CliError> {
        manifest
            .classes
            .iter()
            .position(|c| c == name)
            .map(|i| i + 1)
            .ok_or_else(|| {
                CliError::Schema(format!("{}:{}: unknown class `{name}`", path.display(), line))
            })
    };
    let frame_of = |path: &Path, line: usize, frame: u64| -> Result<usize, CliError> {
        frame_index.get(&frame).copied().ok_or_else(|| {
            CliError::Schema(format!(
                "{}:{}: frame {frame} has no cloud record",
                path.display(),
                line
            ))
        })
    };

    let gt_path = dir.join(GT_FILE);
    let gt_records: Vec<BoxRecord> = read_jsonl(&gt_path)?;
    for (i, r) in gt_records.iter().enumerate() {
        let scene = frame_of(&gt_path, i + 1, r.frame)?;
        let class = class_id(&gt_path, i + 1, &r.class)?;
        let box7 = validate_box(&gt_path, i + 1, r)?;
        scenes[scene].gts.push((box7, class));
    }

    let mut proposals: Vec<Vec<Proposal>> = vec![Vec::new(); scenes.len()];
    let prop_path = dir.join(PROPOSALS_FILE);
    if prop_path.exists() {
        let prop_records: Vec<BoxRecord> = read_jsonl(&prop_path)?;
        for (i, r) in prop_records.iter().enumerate() {
            let scene = frame_of(&prop_path, i + 1, r.frame)?;
            let class = class_id(&prop_path, i + 1, &r.class)?;
            let box7 = validate_box(&prop_path, i + 1, r)?;
            let score = r.score.unwrap_or(0.5);
            if !(0.0..=1.0).contains(&score) {
                return Err(CliError::Schema(format!(
                    "{}:{}: score {score} outside [0, 1]",
                    prop_path.display(),
                    i + 1
                )));
            }
            proposals[scene].push(Proposal { box7, class, score });
        }
    }

    let train_set: BTreeSet<u64> = manifest.splits.train.iter().copied().collect();
    let val_set: BTreeSet<u64> = manifest.splits.val.iter().copied().collect();
    Ok(Dataset {
        manifest,
        scenes,
        proposals,
        train_set,
        val_set,
    })
}

/// Serializes scenes and proposals back into records.
pub fn scene_to_cloud_record(scene: &Scene) -> CloudRecord {
    CloudRecord {
        frame: scene.frame_id,
        points: scene
            .cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut row = vec![p.x, p.y, p.z];
                if let Some(extra) = scene.cloud.extras.get(i) {
                    row.extend_from_slice(extra);
                }
                row
            })
            .collect(),
    }
}

pub fn box_record(frame: u64, class_name: &str, b: &Box7, score: Option<f64>) -> BoxRecord {
    BoxRecord {
        frame,
        class: class_name.into(),
        r#box: [b.x, b.y, b.z, b.w, b.l, b.h, b.theta],
        score,
        empty_crop: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn jsonl_roundtrip_and_line_diagnostics() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("boxes.jsonl");
        let records = vec![
            box_record(0, "vehicle", &Box7::new(1.0, 2.0, 0.5, 1.9, 4.6, 1.7, 0.3).unwrap(), Some(0.9)),
            box_record(1, "vehicle", &Box7::new(0.0, 0.0, 0.5, 1.9, 4.6, 1.7, -0.4).unwrap(), None),
        ];
        write_jsonl(&path, &records).unwrap();
        let back: Vec<BoxRecord> = read_jsonl(&path).unwrap();
        assert_eq!(records, back);

        // corrupt line 2 and expect the line number in the error
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("-0.4]", "-0.4, \"x\"]");
        std::fs::write(&path, text).unwrap();
        let err = read_jsonl::<BoxRecord>(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn extra_point_channels_ride_along() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("clouds.jsonl");
        let record = CloudRecord {
            frame: 4,
            points: vec![vec![1.0, 2.0, 0.5, 0.83], vec![-1.0, 0.0, 0.2, 0.11]],
        };
        write_jsonl(&path, std::slice::from_ref(&record)).unwrap();
        let back: Vec<CloudRecord> = read_jsonl(&path).unwrap();
        let cloud = cloud_from_record(&path, 1, &back[0]).unwrap();
        assert_eq!(cloud.extras, vec![vec![0.83], vec![0.11]]);
        assert_eq!(scene_to_cloud_record(&Scene {
            frame_id: 4,
            cloud,
            gts: Vec::new(),
        }), record);

        // ragged extras are a schema error
        let ragged = CloudRecord {
            frame: 5,
            points: vec![vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]],
        };
        assert!(cloud_from_record(&path, 1, &ragged).is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        // no stray temp files left behind
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }
}
