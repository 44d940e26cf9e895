//! The shared-MLP + max-pool backbone with classification and regression
//! heads, with hand-written forward and backward passes.
//!
//! Per point, three affine layers (widths `[64, 64, 512]` by default) with a
//! rectifier after each are applied with shared weights; a componentwise max
//! over the point axis aggregates the proposal, and two affine heads produce
//! `C + 1` class logits and 7 regression outputs. The backward pass routes
//! the pooled gradient to each feature's argmax point, ties broken to the
//! lowest point index so repeated points stay reproducible.

use crate::encoding::EncodedBatch;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[allow(unused_imports)]
use num_traits::Float;

/// Floating-point element type of a model: `f64` for tests and gradient
/// checks, `f32` for throughput runs.
pub trait Scalar:
    Float + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    /// Width in bytes, used to tag serialized checkpoints.
    const WIDTH: u8;

    fn of(value: f64) -> Self {
        num_traits::NumCast::from(value).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;
}
impl Scalar for f64 {
    const WIDTH: u8 = 8;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("stale forward cache: model has changed since the forward pass")]
    StaleCache,
    #[error("non-finite gradient in layer {layer} ({tensor})")]
    NonFiniteGradient { layer: usize, tensor: &'static str },
    #[error("invalid channel spec: {0}")]
    InvalidSpec(&'static str),
}

/// Layer widths: the per-point embedding stack plus optional hidden widths
/// inside each head (empty = single affine head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpec {
    pub embed: Vec<usize>,
    pub cls_hidden: Vec<usize>,
    pub reg_hidden: Vec<usize>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            embed: vec![64, 64, 512],
            cls_hidden: Vec::new(),
            reg_hidden: Vec::new(),
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.embed.is_empty() {
            return Err(NetworkError::InvalidSpec("embed widths must be non-empty"));
        }
        if self
            .embed
            .iter()
            .chain(&self.cls_hidden)
            .chain(&self.reg_hidden)
            .any(|&w| w == 0)
        {
            return Err(NetworkError::InvalidSpec("layer widths must be positive"));
        }
        Ok(())
    }
}

/// One affine layer; `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<P> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<P>,
    pub bias: Vec<P>,
}

impl<P: Scalar> Affine<P> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // fan-in scaled uniform, zero biases
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| P::of(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![P::zero(); out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, input: &[P], out: &mut [P]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for ((o, row), b) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim))
            .zip(&self.bias)
        {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc = acc + *w * *x;
            }
            *o = acc;
        }
    }

    /// `din = W^T dout`.
    fn backward_input(&self, dout: &[P], din: &mut [P]) {
        for d in din.iter_mut() {
            *d = P::zero();
        }
        for (d, row) in dout.iter().zip(self.weight.chunks_exact(self.in_dim)) {
            if *d != P::zero() {
                for (di, w) in din.iter_mut().zip(row) {
                    *di = *di + *w * *d;
                }
            }
        }
    }
}

/// Gradient (or momentum) storage congruent with one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<P> {
    pub weight: Vec<P>,
    pub bias: Vec<P>,
}

impl<P: Scalar> LayerGrad<P> {
    fn zeros_like(layer: &Affine<P>) -> Self {
        Self {
            weight: vec![P::zero(); layer.weight.len()],
            bias: vec![P::zero(); layer.bias.len()],
        }
    }

    fn accumulate(&mut self, in_dim: usize, dout: &[P], input: &[P]) {
        for (d, wrow) in dout.iter().zip(self.weight.chunks_exact_mut(in_dim)) {
            if *d != P::zero() {
                for (gw, x) in wrow.iter_mut().zip(input) {
                    *gw = *gw + *d * *x;
                }
            }
        }
        for (gb, d) in self.bias.iter_mut().zip(dout) {
            *gb = *gb + *d;
        }
    }
}

/// One gradient tensor per parameter tensor, in the model's canonical layer
/// order (embedding stack, then classification head, then regression head).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<P> {
    pub layers: Vec<LayerGrad<P>>,
}

impl<P: Scalar> GradientSet<P> {
    pub fn zeros_like(model: &PointNetModel<P>) -> Self {
        Self {
            layers: model.layers().map(LayerGrad::zeros_like).collect(),
        }
    }

    /// Elementwise sum, used for deterministic chunked reductions.
    pub fn add_assign(&mut self, other: &GradientSet<P>) {
        assert_eq!(self.layers.len(), other.layers.len(), "gradient shape mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x = *x + *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = P::of(factor);
        for layer in &mut self.layers {
            for x in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *x = *x * f;
            }
        }
    }
}

/// Per-proposal network output: `C + 1` class logits and 7 regression values.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector<P> {
    pub class_logits: Vec<P>,
    pub regression: [P; 7],
}

/// Upstream loss gradients, batch-major: `d loss / d logits` and
/// `d loss / d regression` (the latter already scaled by lambda).
#[derive(Debug, Clone)]
pub struct LossGrads<P> {
    pub dlogits: Vec<P>,
    pub dreg: Vec<P>,
}

/// Shared-MLP + max-pool backbone with two affine heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNetModel<P> {
    pub input_channels: usize,
    pub num_classes: usize,
    pub embed: Vec<Affine<P>>,
    pub cls_head: Vec<Affine<P>>,
    pub reg_head: Vec<Affine<P>>,
    revision: u64,
}

impl<P: Scalar> PointNetModel<P> {
    pub fn feature_dim(&self) -> usize {
        self.embed.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Canonical layer order used by gradients, optimizer state and
    /// checkpoints.
    pub fn layers(&self) -> impl Iterator<Item = &Affine<P>> {
        self.embed
            .iter()
            .chain(self.cls_head.iter())
            .chain(self.reg_head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine<P>> {
        self.embed
            .iter_mut()
            .chain(self.cls_head.iter_mut())
            .chain(self.reg_head.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Affine::param_count).sum()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Marks parameters as changed, invalidating outstanding caches.
    pub fn bump_revision(&mut self) {
        self.revision += 1;
    }
}

fn head_layers<P: Scalar>(
    input_dim: usize,
    hidden: &[usize],
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Affine<P>> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut d = input_dim;
    for &h in hidden {
        layers.push(Affine::init(d, h, rng));
        d = h;
    }
    layers.push(Affine::init(d, out_dim, rng));
    layers
}

/// Fan-in-scaled random initialization, deterministic per seed; biases zero.
pub fn init_model<P: Scalar>(
    rng: &mut ChaCha8Rng,
    spec: &ChannelSpec,
    input_channels: usize,
    num_classes: usize,
) -> Result<PointNetModel<P>, NetworkError> {
    spec.validate()?;
    if input_channels == 0 {
        return Err(NetworkError::InvalidSpec("input_channels must be positive"));
    }
    if num_classes == 0 {
        return Err(NetworkError::InvalidSpec("num_classes must be positive"));
    }
    let mut embed = Vec::with_capacity(spec.embed.len());
    let mut d = input_channels;
    for &width in &spec.embed {
        embed.push(Affine::init(d, width, rng));
        d = width;
    }
    let cls_head = head_layers(d, &spec.cls_hidden, num_classes + 1, rng);
    let reg_head = head_layers(d, &spec.reg_hidden, 7, rng);
    Ok(PointNetModel {
        input_channels,
        num_classes,
        embed,
        cls_head,
        reg_head,
        revision: 0,
    })
}

/// Activations retained by [`forward`] for the backward pass: the converted
/// inputs, pooled features with argmax indices, and head hidden
/// pre-activations. Per-point embeddings are recomputed on demand.
#[derive(Debug, Clone)]
pub struct ForwardCache<P> {
    revision: u64,
    num_proposals: usize,
    points: usize,
    channels: usize,
    inputs: Vec<P>,
    pooled: Vec<P>,
    argmax: Vec<u32>,
    cls_hidden: Vec<P>,
    reg_hidden: Vec<P>,
}

fn hidden_width_sum<P: Scalar>(head: &[Affine<P>]) -> usize {
    head.iter().take(head.len() - 1).map(|l| l.out_dim).sum()
}

/// Runs a head chain, storing hidden pre-activations at `hidden_cache`.
fn head_forward<P: Scalar>(head: &[Affine<P>], pooled: &[P], hidden_cache: &mut [P]) -> Vec<P> {
    let mut activ: Vec<P> = pooled.to_vec();
    let mut offset = 0;
    for (k, layer) in head.iter().enumerate() {
        let mut out = vec![P::zero(); layer.out_dim];
        layer.forward(&activ, &mut out);
        if k + 1 < head.len() {
            hidden_cache[offset..offset + layer.out_dim].copy_from_slice(&out);
            offset += layer.out_dim;
            for v in out.iter_mut() {
                if *v < P::zero() {
                    *v = P::zero();
                }
            }
        }
        activ = out;
    }
    activ
}

/// Per-point MLP, max-pool over the point axis, then the two heads.
/// Permutation-invariant by construction.
pub fn forward<P: Scalar>(
    model: &PointNetModel<P>,
    batch: &EncodedBatch,
) -> Result<(Vec<PredictionVector<P>>, ForwardCache<P>), NetworkError> {
    if batch.channels != model.input_channels {
        return Err(NetworkError::ShapeMismatch("batch channels != model input channels"));
    }
    if batch.num_proposals() > 0 && batch.points_per_proposal == 0 {
        return Err(NetworkError::ShapeMismatch("points_per_proposal must be >= 1"));
    }

    let n = batch.num_proposals();
    let points = batch.points_per_proposal;
    let ch = batch.channels;
    let feat = model.feature_dim();

    let inputs: Vec<P> = batch.features.iter().map(|&x| P::of(x)).collect();
    let mut pooled = vec![P::zero(); n * feat];
    let mut argmax = vec![0u32; n * feat];
    let cls_hidden_w = hidden_width_sum(&model.cls_head);
    let reg_hidden_w = hidden_width_sum(&model.reg_head);
    let mut cls_hidden = vec![P::zero(); n * cls_hidden_w];
    let mut reg_hidden = vec![P::zero(); n * reg_hidden_w];
    let mut preds = Vec::with_capacity(n);

    let mut scratch = EmbedScratch::new(model);
    for i in 0..n {
        let prop = &inputs[i * points * ch..(i + 1) * points * ch];
        let pool = &mut pooled[i * feat..(i + 1) * feat];
        let arg = &mut argmax[i * feat..(i + 1) * feat];
        for p in 0..points {
            let x = &prop[p * ch..(p + 1) * ch];
            let a = scratch.embed_point(model, x);
            if p == 0 {
                pool.copy_from_slice(a);
            } else {
                for (f, &v) in a.iter().enumerate() {
                    if v > pool[f] {
                        pool[f] = v;
                        arg[f] = p as u32;
                    }
                }
            }
        }

        let logits = head_forward(
            &model.cls_head,
            pool,
            &mut cls_hidden[i * cls_hidden_w..(i + 1) * cls_hidden_w],
        );
        let reg = head_forward(
            &model.reg_head,
            pool,
            &mut reg_hidden[i * reg_hidden_w..(i + 1) * reg_hidden_w],
        );
        let mut regression = [P::zero(); 7];
        regression.copy_from_slice(&reg);
        preds.push(PredictionVector {
            class_logits: logits,
            regression,
        });
    }

    let cache = ForwardCache {
        revision: model.revision,
        num_proposals: n,
        points,
        channels: ch,
        inputs,
        pooled,
        argmax,
        cls_hidden,
        reg_hidden,
    };
    Ok((preds, cache))
}

/// Reusable per-point activation buffers; the last entry of `post` is the
/// rectified embedding fed to the pool.
struct EmbedScratch<P> {
    pre: Vec<Vec<P>>,
    post: Vec<Vec<P>>,
}

impl<P: Scalar> EmbedScratch<P> {
    fn new(model: &PointNetModel<P>) -> Self {
        let pre = model.embed.iter().map(|l| vec![P::zero(); l.out_dim]).collect();
        let post = model.embed.iter().map(|l| vec![P::zero(); l.out_dim]).collect();
        Self { pre, post }
    }

    /// Embeds one point, returning the final rectified activation.
    fn embed_point(&mut self, model: &PointNetModel<P>, x: &[P]) -> &[P] {
        for k in 0..model.embed.len() {
            let (done, rest) = self.post.split_at_mut(k);
            let input: &[P] = if k == 0 { x } else { &done[k - 1] };
            model.embed[k].forward(input, &mut self.pre[k]);
            let out = &mut rest[0];
            for (o, &z) in out.iter_mut().zip(&self.pre[k]) {
                *o = if z > P::zero() { z } else { P::zero() };
            }
        }
        &self.post[model.embed.len() - 1]
    }
}

/// Backpropagates a head chain; returns nothing but accumulates layer grads
/// and adds the head's contribution into `dpooled`.
#[allow(clippy::too_many_arguments)]
fn head_backward<P: Scalar>(
    head: &[Affine<P>],
    grads: &mut [LayerGrad<P>],
    pooled: &[P],
    hidden_z: &[P],
    dout: &[P],
    dpooled: &mut [P],
) {
    // recover hidden activations from cached pre-activations
    let mut offsets = Vec::with_capacity(head.len());
    let mut off = 0;
    for layer in head.iter().take(head.len() - 1) {
        offsets.push(off);
        off += layer.out_dim;
    }

    let mut d: Vec<P> = dout.to_vec();
    for k in (0..head.len()).rev() {
        let input_act: Vec<P> = if k == 0 {
            pooled.to_vec()
        } else {
            hidden_z[offsets[k - 1]..offsets[k - 1] + head[k - 1].out_dim]
                .iter()
                .map(|&z| if z > P::zero() { z } else { P::zero() })
                .collect()
        };
        grads[k].accumulate(head[k].in_dim, &d, &input_act);
        let mut din = vec![P::zero(); head[k].in_dim];
        head[k].backward_input(&d, &mut din);
        if k == 0 {
            for (acc, v) in dpooled.iter_mut().zip(&din) {
                *acc = *acc + *v;
            }
        } else {
            let z = &hidden_z[offsets[k - 1]..offsets[k - 1] + head[k - 1].out_dim];
            for (v, &zz) in din.iter_mut().zip(z) {
                if zz <= P::zero() {
                    *v = P::zero();
                }
            }
            d = din;
        }
    }
}

/// Exact gradients of the upstream loss w.r.t. every parameter. The cache
/// must come from a forward pass on the current model revision.
pub fn backward<P: Scalar>(
    model: &PointNetModel<P>,
    cache: &ForwardCache<P>,
    loss_grads: &LossGrads<P>,
) -> Result<GradientSet<P>, NetworkError> {
    if cache.revision != model.revision {
        return Err(NetworkError::StaleCache);
    }
    if cache.channels != model.input_channels {
        return Err(NetworkError::ShapeMismatch("cache channels != model input channels"));
    }
    let n = cache.num_proposals;
    let classes = model.num_classes + 1;
    if loss_grads.dlogits.len() != n * classes || loss_grads.dreg.len() != n * 7 {
        return Err(NetworkError::ShapeMismatch("loss gradient length != batch outputs"));
    }

    let feat = model.feature_dim();
    let num_embed = model.embed.len();
    let num_cls = model.cls_head.len();
    let mut grads = GradientSet::zeros_like(model);
    let (embed_grads, head_grads) = grads.layers.split_at_mut(num_embed);
    let (cls_grads, reg_grads) = head_grads.split_at_mut(num_cls);

    let cls_hidden_w = hidden_width_sum(&model.cls_head);
    let reg_hidden_w = hidden_width_sum(&model.reg_head);

    let points = cache.points;
    let ch = cache.channels;
    let mut dlast = vec![P::zero(); points * feat];
    let mut touched = vec![false; points];
    let mut scratch = EmbedScratch::new(model);
    let mut dz: Vec<Vec<P>> = model.embed.iter().map(|l| vec![P::zero(); l.out_dim]).collect();

    for i in 0..n {
        let pooled = &cache.pooled[i * feat..(i + 1) * feat];
        let argmax = &cache.argmax[i * feat..(i + 1) * feat];

        let mut dpooled = vec![P::zero(); feat];
        head_backward(
            &model.cls_head,
            cls_grads,
            pooled,
            &cache.cls_hidden[i * cls_hidden_w..(i + 1) * cls_hidden_w],
            &loss_grads.dlogits[i * classes..(i + 1) * classes],
            &mut dpooled,
        );
        head_backward(
            &model.reg_head,
            reg_grads,
            pooled,
            &cache.reg_hidden[i * reg_hidden_w..(i + 1) * reg_hidden_w],
            &loss_grads.dreg[i * 7..(i + 1) * 7],
            &mut dpooled,
        );

        // scatter the pooled gradient to each feature's argmax point; a
        // pooled value of zero means the rectifier was inactive there
        for v in dlast.iter_mut() {
            *v = P::zero();
        }
        for t in touched.iter_mut() {
            *t = false;
        }
        for f in 0..feat {
            if dpooled[f] != P::zero() && pooled[f] > P::zero() {
                let p = argmax[f] as usize;
                dlast[p * feat + f] = dlast[p * feat + f] + dpooled[f];
                touched[p] = true;
            }
        }

        let prop_inputs = &cache.inputs[i * points * ch..(i + 1) * points * ch];
        for p in 0..points {
            if !touched[p] {
                continue;
            }
            let x = &prop_inputs[p * ch..(p + 1) * ch];
            // recompute this point's activations, then walk the stack back
            scratch.embed_point(model, x);
            dz[num_embed - 1].copy_from_slice(&dlast[p * feat..(p + 1) * feat]);
            for k in (0..num_embed).rev() {
                let (dz_in, dz_out) = dz.split_at_mut(k);
                let d = &dz_out[0];
                let input_act: &[P] = if k == 0 { x } else { &scratch.post[k - 1] };
                embed_grads[k].accumulate(model.embed[k].in_dim, d, input_act);
                if k > 0 {
                    model.embed[k].backward_input(d, &mut dz_in[k - 1]);
                    for (v, &z) in dz_in[k - 1].iter_mut().zip(&scratch.pre[k - 1]) {
                        if z <= P::zero() {
                            *v = P::zero();
                        }
                    }
                }
            }
        }
    }

    Ok(grads)
}

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// `v <- m*v + g + wd*p; p <- p - lr*v`. Rejects non-finite gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<P> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<LayerGrad<P>>,
}

impl<P: Scalar> OptimizerState<P> {
    pub fn new(model: &PointNetModel<P>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.layers().map(LayerGrad::zeros_like).collect(),
        }
    }
}

pub fn sgd_step<P: Scalar>(
    model: &mut PointNetModel<P>,
    grads: &GradientSet<P>,
    state: &mut OptimizerState<P>,
    lr: f64,
) -> Result<(), NetworkError> {
    if grads.layers.len() != state.velocity.len() {
        return Err(NetworkError::ShapeMismatch("gradient/velocity layer count"));
    }
    for (idx, g) in grads.layers.iter().enumerate() {
        if g.weight.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteGradient { layer: idx, tensor: "weight" });
        }
        if g.bias.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteGradient { layer: idx, tensor: "bias" });
        }
    }
    let m = P::of(state.momentum);
    let wd = P::of(state.weight_decay);
    let lr = P::of(lr);
    for ((layer, g), v) in model
        .embed
        .iter_mut()
        .chain(model.cls_head.iter_mut())
        .chain(model.reg_head.iter_mut())
        .zip(&grads.layers)
        .zip(&mut state.velocity)
    {
        debug_assert_eq!(layer.weight.len(), g.weight.len());
        for ((p, g), v) in layer.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
            *v = m * *v + *g + wd * *p;
            *p = *p - lr * *v;
        }
        for ((p, g), v) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *v = m * *v + *g + wd * *p;
            *p = *p - lr * *v;
        }
    }
    model.bump_revision();
    Ok(())
}

/// Poly schedule: `lr0 * (1 - iter/max_iter)^power`, hitting zero at the end.
pub fn poly_lr(iter: u64, max_iter: u64, lr0: f64, power: f64) -> f64 {
    debug_assert!(iter <= max_iter);
    if max_iter == 0 {
        return lr0;
    }
    let frac = 1.0 - (iter.min(max_iter) as f64) / (max_iter as f64);
    lr0 * frac.powf(power)
}
