//! Versioned binary checkpoint.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! ```text
//! magic            4  b"PRFC"
//! version          4  u32 (currently 1)
//! precision        1  u8: scalar width in bytes (4 = f32, 8 = f64)
//! variant          1  u8: 0 plain, 1 size_normalized, 2 anchor,
//!                        3 boundary_offset, 4 virtual_points
//! pad              2  zero
//! input_channels   4  u32
//! num_classes      4  u32
//! points_per_prop  4  u32
//! virtual_grid     4  u32
//! voxel_grid       4  u32
//! enlarge_wl       8  f64
//! momentum         8  f64
//! weight_decay     8  f64
//! embed widths     4 + 4n   u32 count, then u32 each
//! cls hidden       4 + 4n
//! reg hidden       4 + 4n
//! anchors          4 + 24n  u32 count, then (w, l, h) f64 per class
//! iteration        8  u64
//! epoch            8  u64
//! rng seed         32
//! rng stream       8  u64
//! rng word pos     16 u128
//! config sha256    32
//! tensors          for each layer in canonical order (embed, cls head,
//!                  reg head): u32 in_dim, u32 out_dim, weight
//!                  (out*in scalars), bias (out scalars)
//! velocity         same tensor block again for the optimizer state
//! ```
//!
//! Save followed by load reproduces the training state bit-exactly.

use crate::config::Precision;
use crate::CliError;
use ptrefine_core::encoding::{AnchorTable, EncoderConfig, Variant};
use ptrefine_core::network::{
    init_model, Affine, ChannelSpec, OptimizerState, PointNetModel, Scalar,
};
use ptrefine_core::trainer::TrainState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PRFC";
const VERSION: u32 = 1;

/// Everything a checkpoint persists besides raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub channels: ChannelSpec,
    pub momentum: f64,
    pub weight_decay: f64,
    pub config_digest: [u8; 32],
}

fn variant_id(v: Variant) -> u8 {
    match v {
        Variant::Plain => 0,
        Variant::SizeNormalized => 1,
        Variant::Anchor => 2,
        Variant::BoundaryOffset => 3,
        Variant::VirtualPoints => 4,
    }
}

fn variant_from_id(id: u8) -> Result<Variant, CliError> {
    Ok(match id {
        0 => Variant::Plain,
        1 => Variant::SizeNormalized,
        2 => Variant::Anchor,
        3 => Variant::BoundaryOffset,
        4 => Variant::VirtualPoints,
        other => return Err(CliError::Schema(format!("checkpoint: unknown variant id {other}"))),
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn widths(&mut self, v: &[usize]) {
        self.u32(v.len() as u32);
        for &w in v {
            self.u32(w as u32);
        }
    }
    fn scalar<P: Scalar>(&mut self, v: P) {
        if P::WIDTH == 4 {
            self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            self.buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Schema("checkpoint: truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, CliError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn widths(&mut self) -> Result<Vec<usize>, CliError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn scalar<P: Scalar>(&mut self) -> Result<P, CliError> {
        if P::WIDTH == 4 {
            Ok(P::of(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64))
        } else {
            Ok(P::of(f64::from_le_bytes(self.take(8)?.try_into().unwrap())))
        }
    }
}

fn write_tensors<P: Scalar>(w: &mut Writer, layers: impl Iterator<Item = (usize, usize, Vec<P>, Vec<P>)>) {
    for (in_dim, out_dim, weight, bias) in layers {
        w.u32(in_dim as u32);
        w.u32(out_dim as u32);
        for v in weight {
            w.scalar(v);
        }
        for v in bias {
            w.scalar(v);
        }
    }
}

pub fn save<P: Scalar>(
    path: &Path,
    state: &TrainState<P>,
    meta: &CheckpointMeta,
) -> Result<(), CliError> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(P::WIDTH);
    w.u8(variant_id(meta.encoder.variant));
    w.u8(0);
    w.u8(0);
    w.u32(state.model.input_channels as u32);
    w.u32(state.model.num_classes as u32);
    w.u32(meta.encoder.points_per_proposal as u32);
    w.u32(meta.encoder.virtual_grid as u32);
    w.u32(meta.encoder.voxel_grid as u32);
    w.f64(meta.encoder.enlarge_wl);
    w.f64(meta.momentum);
    w.f64(meta.weight_decay);
    w.widths(&meta.channels.embed);
    w.widths(&meta.channels.cls_hidden);
    w.widths(&meta.channels.reg_hidden);
    w.u32(meta.encoder.anchors.len() as u32);
    for dims in meta.encoder.anchors.entries() {
        for &d in dims {
            w.f64(d);
        }
    }
    w.u64(state.iteration);
    w.u64(state.epoch as u64);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.u128(state.rng.get_word_pos());
    w.bytes(&meta.config_digest);
    write_tensors(
        &mut w,
        state
            .model
            .layers()
            .map(|l| (l.in_dim, l.out_dim, l.weight.clone(), l.bias.clone())),
    );
    write_tensors(
        &mut w,
        state
            .model
            .layers()
            .zip(&state.opt.velocity)
            .map(|(l, v)| (l.in_dim, l.out_dim, v.weight.clone(), v.bias.clone())),
    );
    crate::formats::write_atomic(path, &w.buf)
}

/// Header fields needed before choosing the scalar type.
pub struct CheckpointHeader {
    pub precision: Precision,
}

pub fn peek_precision(path: &Path) -> Result<Precision, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != MAGIC {
        return Err(CliError::Schema(format!("{}: not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Schema(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    match r.u8()? {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        other => Err(CliError::Schema(format!(
            "{}: unknown precision width {other}",
            path.display()
        ))),
    }
}

pub fn load<P: Scalar>(path: &Path) -> Result<(TrainState<P>, CheckpointMeta), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != MAGIC {
        return Err(CliError::Schema(format!("{}: not a checkpoint", path.display())));
    }
    if r.u32()? != VERSION {
        return Err(CliError::Schema(format!("{}: unsupported version", path.display())));
    }
    let width = r.u8()?;
    if width != P::WIDTH {
        return Err(CliError::Schema(format!(
            "{}: precision width {width} does not match requested scalar",
            path.display()
        )));
    }
    let variant = variant_from_id(r.u8()?)?;
    r.take(2)?;
    let input_channels = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let points_per_proposal = r.u32()? as usize;
    let virtual_grid = r.u32()? as usize;
    let voxel_grid = r.u32()? as usize;
    let enlarge_wl = r.f64()?;
    let momentum = r.f64()?;
    let weight_decay = r.f64()?;
    let embed = r.widths()?;
    let cls_hidden = r.widths()?;
    let reg_hidden = r.widths()?;
    let anchor_count = r.u32()? as usize;
    let mut anchor_sizes = Vec::with_capacity(anchor_count);
    for _ in 0..anchor_count {
        anchor_sizes.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let anchors = AnchorTable::new(anchor_sizes)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let iteration = r.u64()?;
    let epoch = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();

    let channels = ChannelSpec {
        embed,
        cls_hidden,
        reg_hidden,
    };
    // build a model of the right shape, then overwrite every tensor
    let mut shape_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: PointNetModel<P> =
        init_model(&mut shape_rng, &channels, input_channels, num_classes)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    read_tensors(&mut r, path, model.layers_mut())?;
    let mut opt = OptimizerState::new(&model, momentum, weight_decay);
    {
        let mut velocity_views: Vec<Affine<P>> = model
            .layers()
            .zip(&opt.velocity)
            .map(|(l, v)| Affine {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weight: v.weight.clone(),
                bias: v.bias.clone(),
            })
            .collect();
        read_tensors(&mut r, path, velocity_views.iter_mut())?;
        for (dst, src) in opt.velocity.iter_mut().zip(velocity_views) {
            dst.weight = src.weight;
            dst.bias = src.bias;
        }
    }
    if r.pos != bytes.len() {
        return Err(CliError::Schema(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let meta = CheckpointMeta {
        precision: if P::WIDTH == 4 { Precision::F32 } else { Precision::F64 },
        encoder: EncoderConfig {
            variant,
            points_per_proposal,
            enlarge_wl,
            virtual_grid,
            voxel_grid,
            anchors,
        },
        num_classes,
        channels,
        momentum,
        weight_decay,
        config_digest,
    };
    let state = TrainState {
        model,
        opt,
        iteration,
        epoch,
        rng,
    };
    Ok((state, meta))
}

fn read_tensors<'m, P: Scalar>(
    r: &mut Reader<'_>,
    path: &Path,
    layers: impl Iterator<Item = &'m mut Affine<P>>,
) -> Result<(), CliError> {
    for layer in layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        if in_dim != layer.in_dim || out_dim != layer.out_dim {
            return Err(CliError::Schema(format!(
                "{}: tensor shape {in_dim}x{out_dim} does not match model {}x{}",
                path.display(),
                layer.in_dim,
                layer.out_dim
            )));
        }
        for v in layer.weight.iter_mut() {
            *v = r.scalar()?;
        }
        for v in layer.bias.iter_mut() {
            *v = r.scalar()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::TempDir;

    fn toy_state(seed: u64) -> (TrainState<f64>, CheckpointMeta) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = ChannelSpec {
            embed: vec![8, 8, 16],
            cls_hidden: vec![],
            reg_hidden: vec![4],
        };
        let mut model: PointNetModel<f64> = init_model(&mut rng, &channels, 9, 2).unwrap();
        // dirty the velocity so the roundtrip covers it
        let mut opt = OptimizerState::new(&model, 0.9, 1e-5);
        for v in &mut opt.velocity {
            for x in v.weight.iter_mut() {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
        for layer in model.layers_mut() {
            for b in layer.bias.iter_mut() {
                *b = rng.gen_range(-0.1..0.1);
            }
        }
        // advance the rng to a nontrivial position
        for _ in 0..13 {
            let _: u64 = rng.gen();
        }
        let anchors = AnchorTable::new(vec![[1.9, 4.6, 1.7], [0.8, 0.9, 1.7]]).unwrap();
        let meta = CheckpointMeta {
            precision: Precision::F64,
            encoder: EncoderConfig {
                variant: Variant::BoundaryOffset,
                points_per_proposal: 128,
                enlarge_wl: 1.0,
                virtual_grid: 4,
                voxel_grid: 14,
                anchors,
            },
            num_classes: 2,
            channels,
            momentum: 0.9,
            weight_decay: 1e-5,
            config_digest: [7u8; 32],
        };
        let state = TrainState {
            model,
            opt,
            iteration: 41,
            epoch: 3,
            rng,
        };
        (state, meta)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ckpt.bin");
        let (state, meta) = toy_state(3);
        save(&path, &state, &meta).unwrap();
        let first = std::fs::read(&path).unwrap();

        let (loaded, loaded_meta) = load::<f64>(&path).unwrap();
        assert_eq!(loaded.model, state.model);
        assert_eq!(loaded.opt, state.opt);
        assert_eq!(loaded.iteration, state.iteration);
        assert_eq!(loaded.epoch, state.epoch);
        assert_eq!(loaded.rng, state.rng);
        assert_eq!(loaded_meta, meta);

        // saving the loaded state reproduces the file byte for byte
        let path2 = dir.path().join("ckpt2.bin");
        save(&path2, &loaded, &loaded_meta).unwrap();
        assert_eq!(first, std::fs::read(&path2).unwrap());

        assert_eq!(peek_precision(&path).unwrap(), Precision::F64);
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ckpt.bin");
        let (state, meta) = toy_state(5);
        save(&path, &state, &meta).unwrap();

        // truncation
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load::<f64>(&path).is_err());

        // wrong precision request
        std::fs::write(&path, &bytes).unwrap();
        assert!(load::<f32>(&path).is_err());

        // wrong magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn rng_position_survives_roundtrip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ckpt.bin");
        let (mut state, meta) = toy_state(9);
        save(&path, &state, &meta).unwrap();
        let (mut loaded, _) = load::<f64>(&path).unwrap();
        let a: [u64; 4] = core::array::from_fn(|_| state.rng.gen());
        let b: [u64; 4] = core::array::from_fn(|_| loaded.rng.gen());
        assert_eq!(a, b);
    }
}
