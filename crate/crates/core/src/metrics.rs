//! Detection evaluation: greedy matching, average precision, the
//! heading-weighted APH variant, difficulty levels and distance ranges.
//!
//! The PR curve is integrated continuously (every detection is a cutoff)
//! with the precision envelope monotonized from the right; a fixed-point
//! interpolated mode is available as a config switch. APH keeps the recall
//! axis but weights each true positive's precision contribution by
//! `1 - heading_error / pi`, with the heading error taken over the full
//! 2*pi residual so a flipped box contributes nothing.

use crate::geometry::{self, wrap_angle, Box7, PointCloud};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid eval spec: {0}")]
    InvalidSpec(&'static str),
    #[error("detection score outside [0, 1]")]
    BadScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: u64,
    pub box7: Box7,
    pub score: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub frame: u64,
    pub box7: Box7,
    pub class: usize,
}

/// Difficulty strata by ground-truth point count; LEVEL_2 is cumulative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Level1,
    Level2,
}

impl Level {
    pub fn name(&self) -> &'static str {
        match self {
            Level::Level1 => "LEVEL_1",
            Level::Level2 => "LEVEL_2",
        }
    }
}

/// How the PR curve is turned into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    /// Every detection is a cutoff; exact area under the monotonized curve.
    Continuous,
    /// Mean of the precision envelope at `n` evenly spaced recall points.
    Interpolated(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    /// Per-class matching IoU (`iou_threshold[class - 1]`).
    pub iou_thresholds: Vec<f64>,
    pub level1_min_points: usize,
    pub level2_min_points: usize,
    /// Half-open distance bins `[lo, hi)`; `hi = inf` for the last.
    pub range_bins: Vec<(f64, f64)>,
    pub sensor_origin: [f64; 2],
    /// Match on BEV IoU instead of 3D IoU.
    pub match_bev: bool,
    pub integration: Integration,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.7, 0.5],
            level1_min_points: 5,
            level2_min_points: 1,
            range_bins: vec![(0.0, 30.0), (30.0, 50.0), (50.0, f64::INFINITY)],
            sensor_origin: [0.0, 0.0],
            match_bev: false,
            integration: Integration::Continuous,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0))
        {
            return Err(MetricsError::InvalidSpec("IoU thresholds must lie in (0, 1)"));
        }
        if self.range_bins.is_empty()
            || self.range_bins.windows(2).any(|w| w[0].1 != w[1].0)
            || self.range_bins.iter().any(|(lo, hi)| lo >= hi)
        {
            return Err(MetricsError::InvalidSpec("range bins must be ordered and contiguous"));
        }
        if let Integration::Interpolated(n) = self.integration {
            if n < 2 {
                return Err(MetricsError::InvalidSpec("interpolation needs >= 2 points"));
            }
        }
        Ok(())
    }
}

/// Outcome of greedy one-to-one matching, in descending-score order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices sorted by descending score (ties keep input order).
    pub order: Vec<usize>,
    /// Per sorted detection: claimed an unmatched gt at or above threshold.
    pub tp: Vec<bool>,
    /// Per sorted detection: the claimed gt index.
    pub matched_gt: Vec<Option<usize>>,
    /// Per sorted detection: `min(|dtheta|, 2pi - |dtheta|)`, zero for FPs.
    pub heading_error: Vec<f64>,
    /// Per gt: whether some detection claimed it.
    pub gt_matched: Vec<bool>,
}

/// Sorts detections by descending score and lets each claim the unmatched
/// same-frame gt of highest IoU, if that IoU reaches the threshold.
pub fn match_detections(
    detections: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
    match_bev: bool,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    sort_by_score_desc(&mut order, |i| detections[i].score);

    let iou = |a: &Box7, b: &Box7| {
        if match_bev {
            geometry::bev_iou(a, b)
        } else {
            geometry::iou_3d(a, b)
        }
    };

    let mut gt_matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    let mut matched_gt = Vec::with_capacity(order.len());
    let mut heading_error = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] || gt.frame != det.frame {
                continue;
            }
            let v = iou(&det.box7, &gt.box7);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_threshold => {
                gt_matched[gi] = true;
                tp.push(true);
                matched_gt.push(Some(gi));
                let d = wrap_angle(det.box7.theta - gts[gi].box7.theta).abs();
                heading_error.push(d.min(2.0 * PI - d));
            }
            _ => {
                tp.push(false);
                matched_gt.push(None);
                heading_error.push(0.0);
            }
        }
    }
    MatchResult {
        order,
        tp,
        matched_gt,
        heading_error,
        gt_matched,
    }
}

fn sort_by_score_desc(order: &mut [usize], score: impl Fn(usize) -> f64) {
    order.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

/// Area under the monotonized precision-recall curve. Flags must be in
/// descending-score order. Conventions: no gts and no detections scores 1,
/// no gts with detections scores 0.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    weighted_average_precision(tp_flags, None, num_gt, Integration::Continuous)
}

pub fn average_precision_with(tp_flags: &[bool], num_gt: usize, integration: Integration) -> f64 {
    weighted_average_precision(tp_flags, None, num_gt, integration)
}

/// AP with each true positive's precision contribution weighted by
/// `1 - heading_error/pi`; always at most the unweighted AP.
pub fn aph(tp_flags: &[bool], heading_errors: &[f64], num_gt: usize) -> f64 {
    aph_with(tp_flags, heading_errors, num_gt, Integration::Continuous)
}

pub fn aph_with(
    tp_flags: &[bool],
    heading_errors: &[f64],
    num_gt: usize,
    integration: Integration,
) -> f64 {
    weighted_average_precision(tp_flags, Some(heading_errors), num_gt, integration)
}

fn weighted_average_precision(
    tp_flags: &[bool],
    heading_errors: Option<&[f64]>,
    num_gt: usize,
    integration: Integration,
) -> f64 {
    if num_gt == 0 {
        return if tp_flags.is_empty() { 1.0 } else { 0.0 };
    }
    if tp_flags.is_empty() {
        return 0.0;
    }

    // PR points, one per detection cutoff
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp_count = 0usize;
    let mut weighted_tp = 0.0f64;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp_count += 1;
            let w = match heading_errors {
                Some(errs) => (1.0 - errs[i] / PI).clamp(0.0, 1.0),
                None => 1.0,
            };
            weighted_tp += w;
        }
        recall.push(tp_count as f64 / num_gt as f64);
        precision.push(weighted_tp / (i + 1) as f64);
    }

    // monotonize the precision envelope from the right
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        if envelope[i + 1] > envelope[i] {
            envelope[i] = envelope[i + 1];
        }
    }

    match integration {
        Integration::Continuous => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..envelope.len() {
                if recall[i] > prev_recall {
                    ap += (recall[i] - prev_recall) * envelope[i];
                    prev_recall = recall[i];
                }
            }
            ap
        }
        Integration::Interpolated(n) => {
            let mut total = 0.0;
            for k in 0..n {
                let r = k as f64 / (n - 1) as f64;
                let p = recall
                    .iter()
                    .zip(&envelope)
                    .find(|(rec, _)| **rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .unwrap_or(0.0);
                total += p;
            }
            total / n as f64
        }
    }
}

/// One cell of the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub class: usize,
    pub level: Level,
    /// `None` for the Overall row, otherwise the bin bounds.
    pub range: Option<(f64, f64)>,
    pub ap: f64,
    pub aph: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

impl EvalCell {
    pub fn range_label(&self) -> String {
        match self.range {
            None => String::from("Overall"),
            Some((lo, hi)) if hi.is_infinite() => format!("{lo:.0}m-Inf"),
            Some((lo, hi)) => format!("{lo:.0}-{hi:.0}m"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn cell(&self, class: usize, level: Level, range: Option<(f64, f64)>) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.class == class && c.level == level && c.range == range)
    }
}

/// Full grid evaluation: per class x difficulty x range, AP and APH. Ground
/// truths are filtered by point count (via closed-box containment against
/// the frame cloud) and binned by the BEV distance of their center;
/// detections are binned by their own center distance. Frames with no cloud
/// record fall back to LEVEL_2 only, with a warning.
pub fn evaluate(
    detections: &[Detection],
    gts: &[GroundTruth],
    clouds: &[PointCloud],
    spec: &EvalSpec,
) -> Result<EvalReport, MetricsError> {
    spec.validate()?;
    if detections.iter().any(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(MetricsError::BadScore);
    }

    let cloud_by_frame: BTreeMap<u64, &PointCloud> =
        clouds.iter().map(|c| (c.frame, c)).collect();

    let mut warnings = Vec::new();
    let mut missing_frames: Vec<u64> = Vec::new();
    let gt_points: Vec<Option<usize>> = gts
        .iter()
        .map(|gt| match cloud_by_frame.get(&gt.frame) {
            Some(cloud) => Some(
                cloud
                    .points
                    .iter()
                    .filter(|&&p| geometry::contains(&gt.box7, p))
                    .count(),
            ),
            None => {
                if !missing_frames.contains(&gt.frame) {
                    missing_frames.push(gt.frame);
                }
                None
            }
        })
        .collect();
    for f in &missing_frames {
        warnings.push(format!(
            "frame {f}: no cloud record; its ground truths are evaluated as LEVEL_2 only"
        ));
    }

    let dist = |b: &Box7| {
        ((b.x - spec.sensor_origin[0]).powi(2) + (b.y - spec.sensor_origin[1]).powi(2)).sqrt()
    };
    let in_range = |d: f64, range: Option<(f64, f64)>| match range {
        None => true,
        Some((lo, hi)) => d >= lo && d < hi,
    };

    let mut ranges: Vec<Option<(f64, f64)>> =
        spec.range_bins.iter().map(|&(lo, hi)| Some((lo, hi))).collect();
    ranges.push(None);

    let mut cells = Vec::new();
    for class in 1..=spec.iou_thresholds.len() {
        let threshold = spec.iou_thresholds[class - 1];
        for level in [Level::Level1, Level::Level2] {
            let min_points = match level {
                Level::Level1 => spec.level1_min_points,
                Level::Level2 => spec.level2_min_points,
            };
            for &range in &ranges {
                let level_member = |points: &Option<usize>| match points {
                    Some(n) => *n >= min_points,
                    // unknown counts participate in LEVEL_2 only
                    None => level == Level::Level2,
                };
                let gts_f: Vec<GroundTruth> = gts
                    .iter()
                    .zip(&gt_points)
                    .filter(|(gt, points)| {
                        gt.class == class
                            && in_range(dist(&gt.box7), range)
                            && level_member(points)
                    })
                    .map(|(gt, _)| *gt)
                    .collect();
                // difficulty-excluded gts absorb their detections instead of
                // turning them into false positives
                let gts_ignored: Vec<GroundTruth> = gts
                    .iter()
                    .zip(&gt_points)
                    .filter(|(gt, points)| {
                        gt.class == class
                            && in_range(dist(&gt.box7), range)
                            && !level_member(points)
                    })
                    .map(|(gt, _)| *gt)
                    .collect();
                let dets_f: Vec<Detection> = detections
                    .iter()
                    .filter(|d| {
                        d.class == class
                            && in_range(dist(&d.box7), range)
                            && (level == Level::Level2
                                || cloud_by_frame.contains_key(&d.frame))
                    })
                    .copied()
                    .collect();

                let m = match_detections(&dets_f, &gts_f, threshold, spec.match_bev);
                let overlaps_ignored = |det: &Detection| {
                    gts_ignored.iter().any(|gt| {
                        gt.frame == det.frame
                            && if spec.match_bev {
                                geometry::bev_iou(&det.box7, &gt.box7)
                            } else {
                                geometry::iou_3d(&det.box7, &gt.box7)
                            } >= threshold
                    })
                };
                let mut tp = Vec::with_capacity(m.tp.len());
                let mut heading_error = Vec::with_capacity(m.tp.len());
                for (k, &di) in m.order.iter().enumerate() {
                    if !m.tp[k] && overlaps_ignored(&dets_f[di]) {
                        continue;
                    }
                    tp.push(m.tp[k]);
                    heading_error.push(m.heading_error[k]);
                }
                let ap = average_precision_with(&tp, gts_f.len(), spec.integration);
                let aph_v = aph_with(&tp, &heading_error, gts_f.len(), spec.integration);
                cells.push(EvalCell {
                    class,
                    level,
                    range,
                    ap,
                    aph: aph_v,
                    num_gt: gts_f.len(),
                    num_detections: dets_f.len(),
                });
            }
        }
    }
    Ok(EvalReport { cells, warnings })
}
