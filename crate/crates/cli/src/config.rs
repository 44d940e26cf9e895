//! The single structured, versioned run config. Unknown keys are rejected
//! before any work starts; flag overrides are applied on top and the
//! effective config is echoed into every output directory.

use crate::CliError;
use ptrefine_core::encoding::{AnchorTable, EncoderConfig, Variant};
use ptrefine_core::metrics::{EvalSpec, Integration};
use ptrefine_core::network::ChannelSpec;
use ptrefine_core::synthetic::{ClassSpec, SceneConfig};
use ptrefine_core::trainer::{JitterParams, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub encoding: EncodingSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            scene: SceneSection::default(),
            dataset: DatasetSection::default(),
            encoding: EncodingSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassSection {
    pub name: String,
    pub count: [usize; 2],
    /// Mean (w, l, h) in meters.
    pub size_mean: [f64; 3],
    pub size_sigma: [f64; 3],
    /// Positive/matching IoU threshold for this class.
    pub iou_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub classes: Vec<ClassSection>,
    pub area: [f64; 4],
    pub sensor: [f64; 3],
    pub points_base: usize,
    pub ref_distance: f64,
    pub min_points: usize,
    pub ground_density: [f64; 2],
    pub ground_noise: f64,
    pub occlusion_prob: f64,
    pub occlusion_keep: [f64; 2],
    pub placement_margin: f64,
    pub max_retries: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        let core = SceneConfig::default();
        Self {
            classes: vec![
                ClassSection {
                    name: "vehicle".into(),
                    count: [2, 6],
                    size_mean: [1.9, 4.6, 1.7],
                    size_sigma: [0.15, 0.4, 0.12],
                    iou_threshold: 0.7,
                },
                ClassSection {
                    name: "pedestrian".into(),
                    count: [2, 6],
                    size_mean: [0.8, 0.9, 1.7],
                    size_sigma: [0.08, 0.1, 0.12],
                    iou_threshold: 0.5,
                },
            ],
            area: core.area,
            sensor: core.sensor,
            points_base: core.points_base,
            ref_distance: core.ref_distance,
            min_points: core.min_points,
            ground_density: [core.ground_density_range.0, core.ground_density_range.1],
            ground_noise: core.ground_noise,
            occlusion_prob: core.occlusion_prob,
            occlusion_keep: [core.occlusion_keep.0, core.occlusion_keep.1],
            placement_margin: core.placement_margin,
            max_retries: core.max_retries,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub scenes: usize,
    pub val_fraction: f64,
    pub proposal_noise: JitterSection,
    pub fp_rate: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            scenes: 100,
            val_fraction: 0.2,
            proposal_noise: JitterSection {
                center: 0.25,
                log_size: 0.05,
                heading: 0.1,
            },
            fp_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JitterSection {
    pub center: f64,
    pub log_size: f64,
    pub heading: f64,
}

impl From<JitterSection> for JitterParams {
    fn from(j: JitterSection) -> Self {
        JitterParams {
            center: j.center,
            log_size: j.log_size,
            heading: j.heading,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingSection {
    pub variant: String,
    pub points_per_proposal: usize,
    pub enlarge_wl: f64,
    pub virtual_grid: usize,
    pub voxel_grid: usize,
}

impl Default for EncodingSection {
    fn default() -> Self {
        Self {
            variant: "boundary_offset".into(),
            points_per_proposal: 512,
            enlarge_wl: 1.0,
            virtual_grid: 4,
            voxel_grid: 14,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub poly_power: f64,
    pub smooth_l1_beta: f64,
    pub precision: String,
    pub gt_mix_ratio: f64,
    pub class_balance: bool,
    pub embed: Vec<usize>,
    pub cls_hidden: Vec<usize>,
    pub reg_hidden: Vec<usize>,
    pub jitter: JitterSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let core = TrainConfig::default();
        Self {
            epochs: core.epochs,
            batch_size: core.batch_size,
            lr0: core.lr0,
            momentum: core.momentum,
            weight_decay: core.weight_decay,
            lambda: core.lambda,
            poly_power: core.poly_power,
            smooth_l1_beta: core.smooth_l1_beta,
            precision: "f64".into(),
            gt_mix_ratio: core.gt_mix_ratio,
            class_balance: core.class_balance,
            embed: vec![64, 64, 512],
            cls_hidden: vec![],
            reg_hidden: vec![],
            jitter: JitterSection {
                center: 0.5,
                log_size: 0.05,
                heading: 0.17,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub level1_min_points: usize,
    pub level2_min_points: usize,
    /// Interior bin boundaries in meters; `[30, 50]` produces the bins
    /// `[0, 30)`, `[30, 50)`, `[50, inf)`.
    pub range_boundaries: Vec<f64>,
    pub match_bev: bool,
    /// 0 = continuous integration, otherwise the interpolation point count.
    pub interpolation_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            level1_min_points: 5,
            level2_min_points: 1,
            range_boundaries: vec![30.0, 50.0],
            match_bev: false,
            interpolation_points: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(path.display(), e))?;
        Self::parse(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
    }

    /// Strict parse: unknown keys, bad types and version mismatches are
    /// schema errors with toml's line/column diagnostics.
    pub fn parse(text: &str) -> Result<Self, String> {
        let config: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if config.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            ));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.scene.classes.is_empty() {
            return Err("scene.classes must not be empty".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.scene.classes {
            if !names.insert(c.name.as_str()) {
                return Err(format!("duplicate class name `{}`", c.name));
            }
            if !(0.0 < c.iou_threshold && c.iou_threshold < 1.0) {
                return Err(format!("class `{}`: iou_threshold must lie in (0, 1)", c.name));
            }
        }
        if !(0.0..1.0).contains(&self.dataset.val_fraction) {
            return Err("dataset.val_fraction must lie in [0, 1)".into());
        }
        self.variant()?;
        self.precision()?;
        if self
            .eval
            .range_boundaries
            .windows(2)
            .any(|w| w[0] >= w[1])
            || self.eval.range_boundaries.first().is_some_and(|&b| b <= 0.0)
        {
            return Err("eval.range_boundaries must be positive and ascending".into());
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant, String> {
        match self.encoding.variant.as_str() {
            "plain" => Ok(Variant::Plain),
            "size_normalized" => Ok(Variant::SizeNormalized),
            "anchor" => Ok(Variant::Anchor),
            "boundary_offset" => Ok(Variant::BoundaryOffset),
            "virtual_points" => Ok(Variant::VirtualPoints),
            other => Err(format!(
                "unknown encoding.variant `{other}` (expected plain, size_normalized, anchor, boundary_offset or virtual_points)"
            )),
        }
    }

    pub fn precision(&self) -> Result<Precision, String> {
        match self.train.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown train.precision `{other}` (expected f32 or f64)")),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.scene.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn iou_thresholds(&self) -> Vec<f64> {
        self.scene.classes.iter().map(|c| c.iou_threshold).collect()
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            classes: self
                .scene
                .classes
                .iter()
                .map(|c| ClassSpec {
                    count_range: (c.count[0], c.count[1]),
                    size_mean: c.size_mean,
                    size_sigma: c.size_sigma,
                })
                .collect(),
            area: self.scene.area,
            sensor: self.scene.sensor,
            points_base: self.scene.points_base,
            ref_distance: self.scene.ref_distance,
            min_points: self.scene.min_points,
            ground_density_range: (self.scene.ground_density[0], self.scene.ground_density[1]),
            ground_noise: self.scene.ground_noise,
            occlusion_prob: self.scene.occlusion_prob,
            occlusion_keep: (self.scene.occlusion_keep[0], self.scene.occlusion_keep[1]),
            placement_margin: self.scene.placement_margin,
            max_retries: self.scene.max_retries,
        }
    }

    pub fn encoder_config(&self, variant: Variant, anchors: AnchorTable) -> EncoderConfig {
        EncoderConfig {
            variant,
            points_per_proposal: self.encoding.points_per_proposal,
            enlarge_wl: self.encoding.enlarge_wl,
            virtual_grid: self.encoding.virtual_grid,
            voxel_grid: self.encoding.voxel_grid,
            anchors,
        }
    }

    pub fn train_config(&self, anchors: AnchorTable) -> Result<TrainConfig, CliError> {
        let variant = self.variant().map_err(CliError::Schema)?;
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            lambda: self.train.lambda,
            poly_power: self.train.poly_power,
            smooth_l1_beta: self.train.smooth_l1_beta,
            seed: self.seed,
            num_classes: self.scene.classes.len(),
            iou_pos_threshold: self.iou_thresholds(),
            encoder: self.encoder_config(variant, anchors),
            channels: ChannelSpec {
                embed: self.train.embed.clone(),
                cls_hidden: self.train.cls_hidden.clone(),
                reg_hidden: self.train.reg_hidden.clone(),
            },
            jitter: self.train.jitter.into(),
            gt_mix_ratio: self.train.gt_mix_ratio,
            class_balance: self.train.class_balance,
        })
    }

    pub fn eval_spec(&self) -> EvalSpec {
        let mut bins = Vec::new();
        let mut lo = 0.0;
        for &b in &self.eval.range_boundaries {
            bins.push((lo, b));
            lo = b;
        }
        bins.push((lo, f64::INFINITY));
        EvalSpec {
            iou_thresholds: self.iou_thresholds(),
            level1_min_points: self.eval.level1_min_points,
            level2_min_points: self.eval.level2_min_points,
            range_bins: bins,
            sensor_origin: [self.scene.sensor[0], self.scene.sensor[1]],
            match_bev: self.eval.match_bev,
            integration: match self.eval.interpolation_points {
                0 => Integration::Continuous,
                n => Integration::Interpolated(n),
            },
        }
    }

    /// Hash of the canonical serialized form, embedded in checkpoints so a
    /// resume against a different config fails loudly.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hasher.finalize().into()
    }
}
