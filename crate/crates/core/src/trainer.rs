//! Batch assembly, augmentation, the epoch loop, and the refinement
//! (inference) pass.
//!
//! Everything is driven by one seeded stream: per-sample sub-seeds are drawn
//! sequentially before any parallel work starts, and gradient reductions sum
//! fixed-size chunks in index order, so results are bit-identical across
//! runs and thread counts.

use crate::encoding::{
    self, encode_batch, EncoderConfig, EncodingError, ProposalCrop, Variant,
};
use crate::geometry::{Box7, GeometryError, PointCloud};
use crate::network::{
    backward, forward, init_model, poly_lr, sgd_step, ChannelSpec, GradientSet, LossGrads,
    NetworkError, OptimizerState, PointNetModel, Scalar,
};
use crate::synthetic::Scene;
use crate::targets::{
    self, classification_loss_grad, regression_loss_grad, LossConfig, TargetError,
};
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[allow(unused_imports)]
use num_traits::Float;

/// Fixed chunk width for parallel batch work; part of the deterministic
/// reduction order, so changing it changes results.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("dataset has no scenes or no trainable samples")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite loss at iteration {iteration} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, iteration: u64 },
    #[error("bench point counts must be ascending and non-empty")]
    BadPointsList,
}

/// A first-stage candidate: box, class hint, and score stub.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub box7: Box7,
    pub class: usize,
    pub score: f64,
}

/// Uniform noise magnitudes for proposal jitter: center in meters, size as a
/// log-ratio, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub center: f64,
    pub log_size: f64,
    pub heading: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            center: 0.5,
            log_size: 0.05,
            heading: 0.17,
        }
    }
}

impl JitterParams {
    pub fn zero() -> Self {
        Self {
            center: 0.0,
            log_size: 0.0,
            heading: 0.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        rng.gen_range(-magnitude..magnitude)
    } else {
        0.0
    }
}

/// Adds uniform noise to center, log-size and heading. Draw order is fixed.
pub fn jitter_proposal(b: &Box7, rng: &mut ChaCha8Rng, m: &JitterParams) -> Box7 {
    let dx = uniform(rng, m.center);
    let dy = uniform(rng, m.center);
    let dz = uniform(rng, m.center);
    let sw = uniform(rng, m.log_size);
    let sl = uniform(rng, m.log_size);
    let sh = uniform(rng, m.log_size);
    let dt = uniform(rng, m.heading);
    Box7::new(
        b.x + dx,
        b.y + dy,
        b.z + dz,
        b.w * sw.exp(),
        b.l * sl.exp(),
        b.h * sh.exp(),
        b.theta + dt,
    )
    .expect("jitter keeps a valid box valid")
}

/// Scenes plus per-scene proposals; the parallel vectors must line up.
#[derive(Debug, Clone, Default)]
pub struct TrainDataset {
    pub scenes: Vec<Scene>,
    pub proposals: Vec<Vec<Proposal>>,
}

impl TrainDataset {
    pub fn num_proposals(&self) -> usize {
        self.proposals.iter().map(Vec::len).sum()
    }

    pub fn num_gts(&self) -> usize {
        self.scenes.iter().map(|s| s.gts.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub poly_power: f64,
    pub smooth_l1_beta: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub iou_pos_threshold: Vec<f64>,
    pub encoder: EncoderConfig,
    pub channels: ChannelSpec,
    pub jitter: JitterParams,
    /// Jittered ground-truth boxes mixed in per epoch, as a fraction of the
    /// gt count (1.0 = one extra positive per gt per epoch).
    pub gt_mix_ratio: f64,
    /// Upsample minority classes to the majority count when building the
    /// per-epoch sample list.
    pub class_balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr0: 0.02,
            momentum: 0.9,
            weight_decay: 1e-5,
            lambda: 20.0,
            poly_power: 1.0,
            smooth_l1_beta: 1.0,
            seed: 0,
            num_classes: 1,
            iou_pos_threshold: vec![0.7],
            encoder: EncoderConfig::default(),
            channels: ChannelSpec::default(),
            jitter: JitterParams::default(),
            gt_mix_ratio: 1.0,
            class_balance: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            smooth_l1_beta: self.smooth_l1_beta,
            iou_pos_threshold: self.iou_pos_threshold.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive"));
        }
        if self.lr0 <= 0.0 || !self.lr0.is_finite() {
            return Err(TrainError::InvalidConfig("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be non-negative"));
        }
        if self.num_classes == 0 || self.iou_pos_threshold.len() != self.num_classes {
            return Err(TrainError::InvalidConfig(
                "need one IoU threshold per foreground class",
            ));
        }
        if self.gt_mix_ratio < 0.0 {
            return Err(TrainError::InvalidConfig("gt_mix_ratio must be non-negative"));
        }
        self.loss_config().validate()?;
        self.channels.validate()?;
        Ok(())
    }
}

/// One structured log line per optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState<P> {
    pub model: PointNetModel<P>,
    pub opt: OptimizerState<P>,
    /// Completed optimization steps.
    pub iteration: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct TrainRun<P> {
    pub state: TrainState<P>,
    pub log: Vec<LossRecord>,
}

#[derive(Debug, Clone, Copy)]
enum SampleRef {
    Proposal { scene: usize, index: usize },
    GtJitter { scene: usize, index: usize },
}

struct Prepared {
    crop: ProposalCrop,
    class_hint: usize,
    label: usize,
    positive: bool,
    target: [f64; 7],
}

/// Crops, samples, labels and targets one training sample. Proposals are
/// labeled by IoU against the scene's ground truth; jittered-gt samples are
/// positives by construction (their whole point is to guarantee positives
/// exist), regressing back to their source box.
fn prepare_sample(
    data: &TrainDataset,
    config: &TrainConfig,
    loss_cfg: &LossConfig,
    sample: SampleRef,
    seed: u64,
) -> Result<Prepared, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene_idx, box7, class_hint, forced_gt) = match sample {
        SampleRef::Proposal { scene, index } => {
            let p = &data.proposals[scene][index];
            (scene, p.box7, p.class, None)
        }
        SampleRef::GtJitter { scene, index } => {
            let (gt, class) = data.scenes[scene].gts[index];
            let jittered = jitter_proposal(&gt, &mut rng, &config.jitter);
            (scene, jittered, class, Some(index))
        }
    };
    let scene = &data.scenes[scene_idx];
    let crop = encoding::crop_points(&scene.cloud, &box7, config.encoder.enlarge_wl)?;
    let crop = encoding::sample_fixed(&crop, config.encoder.points_per_proposal, &mut rng)?;
    let (label, matched) = match forced_gt {
        Some(gt_idx) => (scene.gts[gt_idx].1, Some(gt_idx)),
        None => targets::assign_label(&box7, &scene.gts, loss_cfg)?,
    };
    let (positive, target) = match matched {
        Some(gt_idx) => {
            let gt = &scene.gts[gt_idx].0;
            let t = if config.encoder.variant == Variant::Anchor {
                let dims = config.encoder.anchors.get(class_hint)?;
                targets::encode_targets_anchored(&box7, gt, dims)
            } else {
                targets::encode_targets(&box7, gt)
            };
            (true, t)
        }
        None => (false, [0.0; 7]),
    };
    Ok(Prepared {
        crop,
        class_hint,
        label,
        positive,
        target,
    })
}

struct ChunkResult<P: Scalar> {
    grads: GradientSet<P>,
    cls_loss_sum: f64,
    reg_loss_sum: f64,
}

/// Encode/forward/backward for one chunk. Loss gradients are computed with
/// chunk-local denominators, then rescaled to the global batch denominators.
fn chunk_pass<P: Scalar>(
    model: &PointNetModel<P>,
    config: &TrainConfig,
    prepared: &[Prepared],
    batch_len: usize,
    batch_positives: usize,
) -> Result<ChunkResult<P>, TrainError> {
    let crops: Vec<ProposalCrop> = prepared.iter().map(|p| p.crop.clone()).collect();
    let hints: Vec<usize> = prepared.iter().map(|p| p.class_hint).collect();
    let labels: Vec<usize> = prepared.iter().map(|p| p.label).collect();
    let positive: Vec<bool> = prepared.iter().map(|p| p.positive).collect();
    let target_rows: Vec<f64> = prepared.iter().flat_map(|p| p.target).collect();

    let batch = encode_batch(&crops, Some(&hints), &config.encoder)?;
    let (preds, cache) = forward(model, &batch)?;

    let classes = model.num_classes + 1;
    let logits: Vec<P> = preds.iter().flat_map(|p| p.class_logits.iter().copied()).collect();
    let regs: Vec<P> = preds.iter().flat_map(|p| p.regression).collect();

    let (cls_chunk, mut dlogits) = classification_loss_grad(&logits, &labels, classes);
    let (reg_chunk, mut dreg) =
        regression_loss_grad(&regs, &target_rows, &positive, config.smooth_l1_beta);

    let chunk_pos = positive.iter().filter(|p| **p).count();
    let cls_scale = P::of(prepared.len() as f64 / batch_len as f64);
    for d in dlogits.iter_mut() {
        *d = *d * cls_scale;
    }
    if chunk_pos > 0 {
        let reg_scale = P::of(config.lambda * chunk_pos as f64 / batch_positives as f64);
        for d in dreg.iter_mut() {
            *d = *d * reg_scale;
        }
    }

    let grads = backward(model, &cache, &LossGrads { dlogits, dreg })?;
    Ok(ChunkResult {
        grads,
        cls_loss_sum: cls_chunk * prepared.len() as f64,
        reg_loss_sum: reg_chunk * chunk_pos as f64,
    })
}

/// Maps fixed-size chunks of `items`, in parallel when the `parallel`
/// feature is on; outputs are always combined in chunk order.
fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_chunks(chunk).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk).map(&f).collect()
    }
}

/// Runs the full crop -> sample -> encode -> forward -> loss -> backward ->
/// step pipeline under the poly schedule. `on_epoch` fires after each epoch
/// with the up-to-date state (for checkpointing) and the epoch's log slice.
pub fn train<P: Scalar>(
    data: &TrainDataset,
    config: &TrainConfig,
    resume: Option<TrainState<P>>,
    mut on_epoch: impl FnMut(&TrainState<P>, &[LossRecord]),
) -> Result<TrainRun<P>, TrainError> {
    config.validate()?;
    if data.scenes.len() != data.proposals.len() {
        return Err(TrainError::InvalidConfig("scenes/proposals length mismatch"));
    }

    let loss_cfg = config.loss_config();
    let mut base_samples: Vec<SampleRef> = Vec::new();
    for (scene, props) in data.proposals.iter().enumerate() {
        for index in 0..props.len() {
            base_samples.push(SampleRef::Proposal { scene, index });
        }
    }
    let gt_refs: Vec<SampleRef> = data
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(scene, s)| {
            (0..s.gts.len()).map(move |index| SampleRef::GtJitter { scene, index })
        })
        .collect();
    if base_samples.is_empty() && gt_refs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let whole_mix = config.gt_mix_ratio.floor() as usize;
    let frac_mix = config.gt_mix_ratio - whole_mix as f64;
    let epoch_len_estimate = base_samples.len()
        + gt_refs.len() * whole_mix
        + if frac_mix > 0.0 { gt_refs.len() } else { 0 };
    let steps_per_epoch = epoch_len_estimate.div_ceil(config.batch_size).max(1);

    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let model = init_model::<P>(
                &mut rng,
                &config.channels,
                config.encoder.channels(),
                config.num_classes,
            )?;
            let opt = OptimizerState::new(&model, config.momentum, config.weight_decay);
            TrainState {
                model,
                opt,
                iteration: 0,
                epoch: 0,
                rng,
            }
        }
    };

    let mut log: Vec<LossRecord> = Vec::new();
    for epoch in state.epoch..config.epochs {
        // assemble this epoch's sample list (order fixed by the rng stream)
        let mut samples = base_samples.clone();
        for _ in 0..whole_mix {
            samples.extend_from_slice(&gt_refs);
        }
        if frac_mix > 0.0 {
            for &r in &gt_refs {
                if state.rng.gen_range(0.0..1.0) < frac_mix {
                    samples.push(r);
                }
            }
        }
        if config.class_balance {
            balance_classes(data, &mut samples, &mut state.rng);
        }
        shuffle(&mut samples, &mut state.rng);
        // The realized epoch length can drift from the estimate by the
        // fractional gt mix; the schedule uses the estimate so that max_iter
        // is known up front.
        let max_iter = (steps_per_epoch * config.epochs) as u64;

        let epoch_log_start = log.len();
        for batch in samples.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| state.rng.gen()).collect();
            let jobs: Vec<(SampleRef, u64)> =
                batch.iter().copied().zip(seeds.iter().copied()).collect();

            let prepared: Vec<Result<Prepared, TrainError>> = map_chunks(&jobs, CHUNK, |chunk| {
                chunk
                    .iter()
                    .map(|(s, seed)| prepare_sample(data, config, &loss_cfg, *s, *seed))
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect();
            let mut batch_prepared = Vec::with_capacity(prepared.len());
            for p in prepared {
                batch_prepared.push(p?);
            }

            let batch_len = batch_prepared.len();
            let batch_positives = batch_prepared.iter().filter(|p| p.positive).count();

            let chunk_results: Vec<Result<ChunkResult<P>, TrainError>> =
                map_chunks(&batch_prepared, CHUNK, |chunk| {
                    chunk_pass(&state.model, config, chunk, batch_len, batch_positives)
                });

            let mut grads = GradientSet::zeros_like(&state.model);
            let mut cls_sum = 0.0;
            let mut reg_sum = 0.0;
            for r in chunk_results {
                let r = r?;
                grads.add_assign(&r.grads);
                cls_sum += r.cls_loss_sum;
                reg_sum += r.reg_loss_sum;
            }
            let cls_loss = cls_sum / batch_len as f64;
            let reg_loss = if batch_positives > 0 {
                reg_sum / batch_positives as f64
            } else {
                0.0
            };
            let total = targets::total_loss(cls_loss, reg_loss, config.lambda);
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    iteration: state.iteration,
                });
            }

            let lr = poly_lr(
                state.iteration.min(max_iter),
                max_iter,
                config.lr0,
                config.poly_power,
            );
            sgd_step(&mut state.model, &grads, &mut state.opt, lr)?;
            state.iteration += 1;
            log.push(LossRecord {
                iteration: state.iteration,
                epoch,
                lr,
                cls_loss,
                reg_loss,
                total,
            });
        }

        state.epoch = epoch + 1;
        on_epoch(&state, &log[epoch_log_start..]);
    }

    Ok(TrainRun { state, log })
}

/// Upsamples minority classes (by class hint) to the majority count.
fn balance_classes(data: &TrainDataset, samples: &mut Vec<SampleRef>, rng: &mut ChaCha8Rng) {
    let class_of = |s: &SampleRef| match *s {
        SampleRef::Proposal { scene, index } => data.proposals[scene][index].class,
        SampleRef::GtJitter { scene, index } => data.scenes[scene].gts[index].1,
    };
    let max_class = samples.iter().map(&class_of).max().unwrap_or(0);
    let mut buckets: Vec<Vec<SampleRef>> = vec![Vec::new(); max_class + 1];
    for &s in samples.iter() {
        buckets[class_of(&s)].push(s);
    }
    let target = buckets.iter().map(Vec::len).max().unwrap_or(0);
    for bucket in &buckets {
        if bucket.is_empty() || bucket.len() == target {
            continue;
        }
        for _ in 0..target - bucket.len() {
            samples.push(bucket[rng.gen_range(0..bucket.len())]);
        }
    }
}

/// Fisher-Yates with the training stream.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// One refined detection: the decoded box, the argmax foreground class and
/// its softmax score, plus the full class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub box7: Box7,
    pub class: usize,
    pub score: f64,
    pub probs: Vec<f64>,
    pub empty: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOptions {
    pub seed: u64,
    pub batch: usize,
    /// When false (default), point-free crops are rescored as background
    /// with the geometry passed through untouched.
    pub empty_passthrough: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 128,
            empty_passthrough: false,
        }
    }
}

/// Rescores and refines proposals against one frame's cloud.
pub fn refine<P: Scalar>(
    model: &PointNetModel<P>,
    encoder: &EncoderConfig,
    cloud: &PointCloud,
    proposals: &[Proposal],
    options: &RefineOptions,
) -> Result<Vec<Refined>, TrainError> {
    let mut master = ChaCha8Rng::seed_from_u64(options.seed ^ cloud.frame);
    let seeds: Vec<u64> = proposals.iter().map(|_| master.gen()).collect();
    let jobs: Vec<(Proposal, u64)> =
        proposals.iter().copied().zip(seeds.iter().copied()).collect();

    let crops: Vec<Result<ProposalCrop, TrainError>> = map_chunks(&jobs, CHUNK, |chunk| {
        chunk
            .iter()
            .map(|(p, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let crop = encoding::crop_points(cloud, &p.box7, encoder.enlarge_wl)?;
                Ok(encoding::sample_fixed(&crop, encoder.points_per_proposal, &mut rng)?)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mut all_crops = Vec::with_capacity(crops.len());
    for c in crops {
        all_crops.push(c?);
    }

    let batch_size = options.batch.max(1);
    let mut out = Vec::with_capacity(proposals.len());
    for (chunk_idx, chunk) in all_crops.chunks(batch_size).enumerate() {
        let offset = chunk_idx * batch_size;
        let hints: Vec<usize> = proposals[offset..offset + chunk.len()]
            .iter()
            .map(|p| p.class)
            .collect();
        let batch = encode_batch(chunk, Some(&hints), encoder)?;
        let (preds, _) = forward(model, &batch)?;
        for (i, pred) in preds.iter().enumerate() {
            let proposal = &proposals[offset + i];
            if chunk[i].is_empty() && !options.empty_passthrough {
                let mut probs = vec![0.0; model.num_classes + 1];
                probs[0] = 1.0;
                out.push(Refined {
                    box7: proposal.box7,
                    class: 0,
                    score: 0.0,
                    probs,
                    empty: true,
                });
                continue;
            }
            let probs = softmax(&pred.class_logits);
            let (class, score) = probs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(c, &p)| (c, p))
                .fold((1, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            let mut regression = [0.0f64; 7];
            for (r, p) in regression.iter_mut().zip(&pred.regression) {
                *r = p.as_f64();
            }
            let box7 = if encoder.variant == Variant::Anchor {
                let dims = encoder.anchors.get(proposal.class)?;
                targets::decode_box_anchored(&proposal.box7, &regression, dims)?
            } else {
                targets::decode_box(&proposal.box7, &regression)?
            };
            out.push(Refined {
                box7,
                class,
                score,
                probs,
                empty: chunk[i].is_empty(),
            });
        }
    }
    Ok(out)
}

fn softmax<P: Scalar>(logits: &[P]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.as_f64()));
    let exps: Vec<f64> = logits.iter().map(|x| (x.as_f64() - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Forward-pass latency per batch as a function of sampled point count.
#[cfg(feature = "std")]
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    pub runs: usize,
    pub param_count: usize,
    pub rows: Vec<BenchRow>,
}

#[cfg(feature = "std")]
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_points: usize,
    pub median_seconds: f64,
}

/// Times the forward pass on random batches of `batch` proposals for each
/// point count (ascending), warmed up, reporting the median of `runs` runs.
#[cfg(feature = "std")]
pub fn bench<P: Scalar>(
    model: &PointNetModel<P>,
    variant: Variant,
    n_points: &[usize],
    batch: usize,
    runs: usize,
    seed: u64,
) -> Result<BenchReport, TrainError> {
    if n_points.is_empty() || n_points.windows(2).any(|w| w[0] >= w[1]) || runs == 0 {
        return Err(TrainError::BadPointsList);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = model.input_channels;
    let mut rows = Vec::with_capacity(n_points.len());
    for &n in n_points {
        let features: Vec<f64> = (0..batch * n * channels)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let proposal = Box7::new(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0).expect("static box");
        let encoded = crate::encoding::EncodedBatch {
            variant,
            channels,
            points_per_proposal: n,
            features,
            proposals: vec![proposal; batch],
            empty: vec![false; batch],
            anchor_dims: None,
        };
        for _ in 0..2 {
            let _ = forward(model, &encoded)?;
        }
        let mut times: Vec<f64> = (0..runs)
            .map(|_| {
                let start = std::time::Instant::now();
                let _ = forward(model, &encoded);
                start.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        rows.push(BenchRow {
            n_points: n,
            median_seconds: times[times.len() / 2],
        });
    }
    Ok(BenchReport {
        batch,
        runs,
        param_count: model.num_params(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::synthetic::Scene;

    fn bx(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Box7 {
        Box7::new(x, y, z, w, l, h, theta).unwrap()
    }

    /// A deterministic scene: a few surface-sampled boxes, no ground.
    fn toy_scene(frame: u64) -> Scene {
        let g1 = bx(5.0, 3.0, 0.85, 1.9, 4.6, 1.7, 0.4);
        let g2 = bx(-6.0, 8.0, 0.85, 0.8, 0.9, 1.7, -1.0);
        let mut points = Vec::new();
        for i in 0..60 {
            let t = i as f64 / 60.0;
            points.push(crate::geometry::from_canonical_point(
                &g1,
                Point3::new(g1.l * (t - 0.5), g1.w * 0.5, g1.h * (t - 0.5) * 0.9),
            ));
            points.push(crate::geometry::from_canonical_point(
                &g2,
                Point3::new(g2.l * 0.5, g2.w * (t - 0.5), g2.h * (t - 0.5) * 0.9),
            ));
        }
        Scene {
            frame_id: frame,
            cloud: PointCloud::new(frame, points),
            gts: vec![(g1, 1), (g2, 2)],
        }
    }

    fn toy_dataset() -> TrainDataset {
        let mut scenes = Vec::new();
        let mut proposals = Vec::new();
        for f in 0..4u64 {
            let scene = toy_scene(f);
            let mut rng = ChaCha8Rng::seed_from_u64(900 + f);
            let noise = JitterParams {
                center: 0.2,
                log_size: 0.05,
                heading: 0.1,
            };
            let props: Vec<Proposal> = scene
                .gts
                .iter()
                .map(|(gt, class)| Proposal {
                    box7: jitter_proposal(gt, &mut rng, &noise),
                    class: *class,
                    score: 0.9,
                })
                .collect();
            scenes.push(scene);
            proposals.push(props);
        }
        TrainDataset { scenes, proposals }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            num_classes: 2,
            iou_pos_threshold: vec![0.5, 0.5],
            encoder: EncoderConfig {
                points_per_proposal: 32,
                ..EncoderConfig::default()
            },
            channels: ChannelSpec {
                embed: vec![8, 8, 16],
                cls_hidden: vec![],
                reg_hidden: vec![],
            },
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn jitter_examples() {
        let b = bx(1.0, 2.0, 0.5, 2.0, 4.0, 1.5, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(jitter_proposal(&b, &mut rng, &JitterParams::zero()), b);

        let m = JitterParams {
            center: 0.5,
            log_size: 0.1,
            heading: 0.2,
        };
        let j = jitter_proposal(&b, &mut rng, &m);
        assert!((j.x - b.x).abs() <= 0.5 && (j.y - b.y).abs() <= 0.5 && (j.z - b.z).abs() <= 0.5);
        assert!((j.w / b.w).ln().abs() <= 0.1);

        let a = jitter_proposal(&b, &mut ChaCha8Rng::seed_from_u64(5), &m);
        let c = jitter_proposal(&b, &mut ChaCha8Rng::seed_from_u64(5), &m);
        assert_eq!(a, c);
    }

    #[test]
    fn train_step_accounting() {
        let data = toy_dataset();
        let mut config = small_config();
        config.epochs = 1;
        config.gt_mix_ratio = 1.0;
        // 8 proposals + 8 gt-jitter = 16 samples, batch 4 -> 4 steps
        let run = train::<f64>(&data, &config, None, |_, _| {}).unwrap();
        assert_eq!(run.log.len(), 4);
        assert!(run.log.windows(2).all(|w| w[0].iteration + 1 == w[1].iteration));
        assert!(run.log.iter().all(|r| r.lr > 0.0 && r.lr <= config.lr0));
        assert!(run.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn train_is_deterministic() {
        let data = toy_dataset();
        let config = small_config();
        let a = train::<f64>(&data, &config, None, |_, _| {}).unwrap();
        let b = train::<f64>(&data, &config, None, |_, _| {}).unwrap();
        assert_eq!(a.state.model, b.state.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = toy_dataset();
        let mut config = small_config();
        config.epochs = 3;

        let full = train::<f64>(&data, &config, None, |_, _| {}).unwrap();

        // capture the state at the end of epoch 1, then resume
        let mut snapshot: Option<TrainState<f64>> = None;
        let _ = train::<f64>(&data, &config, None, |state, _| {
            if state.epoch == 1 {
                snapshot = Some(state.clone());
            }
        })
        .unwrap();
        let resumed = train::<f64>(&data, &config, snapshot, |_, _| {}).unwrap();
        assert_eq!(resumed.state.model, full.state.model);
        assert_eq!(resumed.state.iteration, full.state.iteration);
    }

    #[test]
    fn training_sanity_loss_halves() {
        // a fixed 64-proposal batch, 200 steps: final loss < 0.5 * initial
        let mut scenes = Vec::new();
        let mut proposals = Vec::new();
        for f in 0..8u64 {
            let scene = toy_scene(f);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + f);
            let noise = JitterParams {
                center: 0.25,
                log_size: 0.08,
                heading: 0.12,
            };
            let props: Vec<Proposal> = scene
                .gts
                .iter()
                .flat_map(|(gt, class)| {
                    (0..4).map(|_| Proposal {
                        box7: jitter_proposal(gt, &mut rng, &noise),
                        class: *class,
                        score: 0.9,
                    })
                    .collect::<Vec<_>>()
                })
                .collect();
            scenes.push(scene);
            proposals.push(props);
        }
        let data = TrainDataset { scenes, proposals };
        assert_eq!(data.num_proposals(), 64);

        let config = TrainConfig {
            epochs: 200,
            batch_size: 64,
            gt_mix_ratio: 0.0,
            num_classes: 2,
            iou_pos_threshold: vec![0.5, 0.5],
            lr0: 0.01,
            encoder: EncoderConfig {
                points_per_proposal: 32,
                ..EncoderConfig::default()
            },
            channels: ChannelSpec {
                embed: vec![16, 16, 32],
                cls_hidden: vec![],
                reg_hidden: vec![],
            },
            seed: 11,
            ..TrainConfig::default()
        };
        let run = train::<f64>(&data, &config, None, |_, _| {}).unwrap();
        assert_eq!(run.log.len(), 200);
        let first = run.log.first().unwrap().total;
        let last = run.log.last().unwrap().total;
        assert!(
            last < 0.5 * first,
            "loss did not halve: {first} -> {last}"
        );
    }

    #[test]
    fn refine_outputs_are_sane() {
        let data = toy_dataset();
        let mut config = small_config();
        config.epochs = 8;
        let run = train::<f64>(&data, &config, None, |_, _| {}).unwrap();
        let scene = &data.scenes[0];
        let refined = refine(
            &run.state.model,
            &config.encoder,
            &scene.cloud,
            &data.proposals[0],
            &RefineOptions::default(),
        )
        .unwrap();
        assert_eq!(refined.len(), data.proposals[0].len());
        for r in &refined {
            assert!(r.box7.w > 0.0 && r.box7.l > 0.0 && r.box7.h > 0.0);
            assert!(r.box7.x.is_finite() && r.box7.theta.is_finite());
            assert!((0.0..=1.0).contains(&r.score));
            assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn refine_flags_empty_crops_as_background() {
        let data = toy_dataset();
        let config = small_config();
        let run = train::<f64>(&data, &config, None, |_, _| {}).unwrap();
        // a proposal far from any points
        let lonely = Proposal {
            box7: bx(200.0, 200.0, 1.0, 2.0, 4.0, 1.5, 0.0),
            class: 1,
            score: 0.5,
        };
        let scene = &data.scenes[0];
        let refined = refine(
            &run.state.model,
            &config.encoder,
            &scene.cloud,
            &[lonely],
            &RefineOptions::default(),
        )
        .unwrap();
        assert!(refined[0].empty);
        assert_eq!(refined[0].class, 0);
        assert_eq!(refined[0].score, 0.0);
        assert_eq!(refined[0].box7, lonely.box7);
    }

    #[cfg(feature = "std")]
    #[test]
    fn bench_rejects_unsorted_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = init_model::<f64>(
            &mut rng,
            &ChannelSpec {
                embed: vec![4, 8],
                cls_hidden: vec![],
                reg_hidden: vec![],
            },
            3,
            1,
        )
        .unwrap();
        assert!(bench(&model, Variant::Plain, &[64, 32], 4, 3, 0).is_err());
        assert!(bench(&model, Variant::Plain, &[], 4, 3, 0).is_err());
        let report = bench(&model, Variant::Plain, &[8, 16], 4, 3, 0).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.param_count, model.num_params());
    }
}
