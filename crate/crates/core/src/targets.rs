//! Label assignment, regression-target encoding/decoding, and the loss
//! functions used to train the refinement network.
//!
//! All box targets are canonical-frame quantities of the proposal:
//! * center: the gt center offset in the proposal frame, divided
//!   componentwise by `(w, l, h)` of the proposal,
//! * size: `log(gt_dim / denom_dim)` per dimension, where the denominators
//!   are the proposal dims, or fixed per-class anchor dims in anchor mode,
//! * heading: the residual folded modulo `pi` into `(-pi/2, pi/2]`, so a
//!   180-degree flipped box regresses to zero instead of an outlier.

use crate::geometry::{
    self, from_canonical_point, to_canonical_point, wrap_angle, Box7, Point3,
};
use crate::network::Scalar;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TargetError {
    #[error("class {0} has no configured IoU threshold")]
    UnknownClass(usize),
    #[error("regression produced a non-finite box field")]
    NonFiniteDecode,
    #[error("invalid loss config: {0}")]
    InvalidConfig(&'static str),
}

/// Per-proposal training target: a class label (0 = background) and, for
/// positives, the seven regression components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementTarget {
    pub class_label: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
    pub valid_regression: bool,
}

impl RefinementTarget {
    pub fn background() -> Self {
        Self {
            class_label: 0,
            center: [0.0; 3],
            size: [0.0; 3],
            heading: 0.0,
            valid_regression: false,
        }
    }

    pub fn positive(class_label: usize, regression: [f64; 7]) -> Self {
        Self {
            class_label,
            center: [regression[0], regression[1], regression[2]],
            size: [regression[3], regression[4], regression[5]],
            heading: regression[6],
            valid_regression: true,
        }
    }

    pub fn regression(&self) -> [f64; 7] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.heading,
        ]
    }
}

/// Loss hyperparameters and per-class positive IoU thresholds
/// (`iou_pos_threshold[class - 1]`; class 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub smooth_l1_beta: f64,
    pub iou_pos_threshold: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            smooth_l1_beta: 1.0,
            iou_pos_threshold: vec![0.7],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.lambda <= 0.0 || !self.lambda.is_finite() {
            return Err(TargetError::InvalidConfig("lambda must be positive"));
        }
        if self.smooth_l1_beta <= 0.0 || !self.smooth_l1_beta.is_finite() {
            return Err(TargetError::InvalidConfig("smooth_l1_beta must be positive"));
        }
        if self.iou_pos_threshold.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return Err(TargetError::InvalidConfig("IoU thresholds must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn threshold_for(&self, class: usize) -> Result<f64, TargetError> {
        if class == 0 || class > self.iou_pos_threshold.len() {
            return Err(TargetError::UnknownClass(class));
        }
        Ok(self.iou_pos_threshold[class - 1])
    }
}

/// Matches the proposal against the ground truth of maximal 3D IoU. The
/// proposal becomes that gt's class if the IoU clears the class threshold,
/// otherwise background. Empty gt lists yield background.
pub fn assign_label(
    proposal: &Box7,
    gts: &[(Box7, usize)],
    config: &LossConfig,
) -> Result<(usize, Option<usize>), TargetError> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, (gt, _)) in gts.iter().enumerate() {
        let iou = geometry::iou_3d(proposal, gt);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((idx, iou));
        }
    }
    match best {
        Some((idx, iou)) => {
            let class = gts[idx].1;
            let threshold = config.threshold_for(class)?;
            if iou >= threshold {
                Ok((class, Some(idx)))
            } else {
                Ok((0, None))
            }
        }
        None => Ok((0, None)),
    }
}

/// Regression targets with the proposal's own dims as size denominators.
pub fn encode_targets(proposal: &Box7, gt: &Box7) -> [f64; 7] {
    encode_targets_anchored(proposal, gt, [proposal.w, proposal.l, proposal.h])
}

/// Regression targets with explicit size denominators (anchor mode). The
/// center offsets always normalize by the proposal dims; only the size
/// log-ratios swap in the anchor dims.
pub fn encode_targets_anchored(proposal: &Box7, gt: &Box7, size_dims: [f64; 3]) -> [f64; 7] {
    let d = to_canonical_point(proposal, gt.center());
    let center = [d.x / proposal.w, d.y / proposal.l, d.z / proposal.h];
    let size = [
        (gt.w / size_dims[0]).ln(),
        (gt.l / size_dims[1]).ln(),
        (gt.h / size_dims[2]).ln(),
    ];
    let heading = fold_heading_residual(gt.theta - proposal.theta);
    [center[0], center[1], center[2], size[0], size[1], size[2], heading]
}

/// Maps a raw heading residual into `(-pi/2, pi/2]`: reduce modulo `pi`,
/// then shift anything past `pi/2` down by `pi`.
pub fn fold_heading_residual(delta: f64) -> f64 {
    let d = geometry::mod_pi(delta);
    if d <= PI / 2.0 {
        d
    } else {
        d - PI
    }
}

/// Exact algebraic inverse of [`encode_targets`], composed with the
/// canonical-to-global transform.
pub fn decode_box(proposal: &Box7, regression: &[f64; 7]) -> Result<Box7, TargetError> {
    decode_box_anchored(proposal, regression, [proposal.w, proposal.l, proposal.h])
}

/// Inverse of [`encode_targets_anchored`].
pub fn decode_box_anchored(
    proposal: &Box7,
    regression: &[f64; 7],
    size_dims: [f64; 3],
) -> Result<Box7, TargetError> {
    let canonical = Point3::new(
        regression[0] * proposal.w,
        regression[1] * proposal.l,
        regression[2] * proposal.h,
    );
    let center = from_canonical_point(proposal, canonical);
    let w = size_dims[0] * regression[3].exp();
    let l = size_dims[1] * regression[4].exp();
    let h = size_dims[2] * regression[5].exp();
    if !(center.is_finite() && w.is_finite() && l.is_finite() && h.is_finite() && regression[6].is_finite()) {
        return Err(TargetError::NonFiniteDecode);
    }
    let theta = wrap_angle(proposal.theta + regression[6]);
    Box7::new(center.x, center.y, center.z, w, l, h, theta).map_err(|_| TargetError::NonFiniteDecode)
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Mean softmax cross entropy over the batch. `logits` is batch-major with
/// `num_classes + 1` entries per sample (background is class 0).
pub fn classification_loss<P: Scalar>(logits: &[P], labels: &[usize], classes_with_bg: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    debug_assert_eq!(logits.len(), labels.len() * classes_with_bg);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes_with_bg..(i + 1) * classes_with_bg];
        total += log_sum_exp(row) - row[label].as_f64();
    }
    total / labels.len() as f64
}

/// Loss plus `d loss / d logits`, batch-major.
pub fn classification_loss_grad<P: Scalar>(
    logits: &[P],
    labels: &[usize],
    classes_with_bg: usize,
) -> (f64, Vec<P>) {
    let mut grads = vec![P::zero(); logits.len()];
    if labels.is_empty() {
        return (0.0, grads);
    }
    let inv_b = 1.0 / labels.len() as f64;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes_with_bg..(i + 1) * classes_with_bg];
        let lse = log_sum_exp(row);
        total += lse - row[label].as_f64();
        for (c, &x) in row.iter().enumerate() {
            let softmax = (x.as_f64() - lse).exp();
            let indicator = if c == label { 1.0 } else { 0.0 };
            grads[i * classes_with_bg + c] = P::of((softmax - indicator) * inv_b);
        }
    }
    (total * inv_b, grads)
}

fn log_sum_exp<P: Scalar>(row: &[P]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |acc, x| acc.max(x.as_f64()));
    let sum: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
    m + sum.ln()
}

/// Smooth-L1 over the seven components, summed per sample and averaged over
/// positive samples only. Zero positives yield zero by convention.
pub fn regression_loss<P: Scalar>(
    predictions: &[P],
    targets: &[f64],
    positive: &[bool],
    beta: f64,
) -> f64 {
    let (loss, _) = regression_loss_impl::<P, false>(predictions, targets, positive, beta);
    loss
}

/// Loss plus `d loss / d predictions` (zero rows for non-positives).
pub fn regression_loss_grad<P: Scalar>(
    predictions: &[P],
    targets: &[f64],
    positive: &[bool],
    beta: f64,
) -> (f64, Vec<P>) {
    regression_loss_impl::<P, true>(predictions, targets, positive, beta)
}

fn regression_loss_impl<P: Scalar, const GRAD: bool>(
    predictions: &[P],
    targets: &[f64],
    positive: &[bool],
    beta: f64,
) -> (f64, Vec<P>) {
    debug_assert_eq!(predictions.len(), positive.len() * 7);
    debug_assert_eq!(targets.len(), predictions.len());
    let num_pos = positive.iter().filter(|p| **p).count();
    let mut grads = if GRAD { vec![P::zero(); predictions.len()] } else { Vec::new() };
    if num_pos == 0 {
        return (0.0, grads);
    }
    let inv = 1.0 / num_pos as f64;
    let mut total = 0.0;
    for (i, &pos) in positive.iter().enumerate() {
        if !pos {
            continue;
        }
        for k in 0..7 {
            let d = predictions[i * 7 + k].as_f64() - targets[i * 7 + k];
            total += smooth_l1(d, beta);
            if GRAD {
                grads[i * 7 + k] = P::of(smooth_l1_grad(d, beta) * inv);
            }
        }
    }
    (total * inv, grads)
}

/// `cls + lambda * reg`.
pub fn total_loss(cls: f64, reg: f64, lambda: f64) -> f64 {
    cls + lambda * reg
}
