//! Point pooling per proposal, fixed-cardinality sampling, and the
//! size-aware per-point feature variants fed to the network.
//!
//! Plain canonical coordinates are ambiguous: two proposals of different
//! sizes enclosing the same points produce identical pooled features. The
//! variants here restore the size signal in different ways — normalizing by
//! the proposal dims, appending per-class anchor dims, appending signed
//! distances to the six proposal faces, or injecting a lattice of virtual
//! points with a real/virtual flag. A voxelized alternative input is also
//! provided for comparison paths.

use crate::geometry::{self, Box7, GeometryError, Point3, PointCloud};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodingError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("class {0} is not present in the anchor table")]
    UnknownClass(usize),
    #[error("anchor sizes must be strictly positive")]
    BadAnchor,
    #[error("sample size must be at least 1")]
    ZeroSample,
    #[error("virtual grid must have at least 2 cells per axis, got {0}")]
    BadGrid(usize),
    #[error("batch requires {expected} points per crop, found {found}")]
    InconsistentCrop { expected: usize, found: usize },
    #[error("anchor variant requires a class hint per proposal")]
    MissingClassHints,
}

/// The per-point feature flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Plain,
    SizeNormalized,
    Anchor,
    BoundaryOffset,
    VirtualPoints,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Plain,
        Variant::SizeNormalized,
        Variant::Anchor,
        Variant::BoundaryOffset,
        Variant::VirtualPoints,
    ];

    /// Feature channels produced per point.
    pub fn channels(&self) -> usize {
        match self {
            Variant::Plain | Variant::SizeNormalized => 3,
            Variant::Anchor => 6,
            Variant::BoundaryOffset => 9,
            Variant::VirtualPoints => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::SizeNormalized => "size_normalized",
            Variant::Anchor => "anchor",
            Variant::BoundaryOffset => "boundary_offset",
            Variant::VirtualPoints => "virtual_points",
        }
    }
}

/// Per-class `(w, l, h)` anchor sizes; classes are 1-based (0 = background).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorTable {
    sizes: Vec<[f64; 3]>,
}

impl AnchorTable {
    pub fn new(sizes: Vec<[f64; 3]>) -> Result<Self, EncodingError> {
        if sizes.iter().flatten().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(EncodingError::BadAnchor);
        }
        Ok(Self { sizes })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn get(&self, class: usize) -> Result<[f64; 3], EncodingError> {
        if class == 0 || class > self.sizes.len() {
            return Err(EncodingError::UnknownClass(class));
        }
        Ok(self.sizes[class - 1])
    }

    pub fn entries(&self) -> &[[f64; 3]] {
        &self.sizes
    }
}

/// Points pooled from an enlarged proposal, held in the canonical frame of
/// the original (un-enlarged) proposal. `raw_count == 0` marks an empty crop
/// whose sampled points are all-zero sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalCrop {
    pub proposal: Box7,
    pub enlarge_wl: f64,
    pub points: PointCloud,
    pub raw_count: usize,
}

impl ProposalCrop {
    pub fn is_empty(&self) -> bool {
        self.raw_count == 0
    }
}

/// Pools every cloud point inside the proposal enlarged by `enlarge_wl` in
/// width and length, expressed canonically w.r.t. the original proposal.
pub fn crop_points(
    cloud: &PointCloud,
    proposal: &Box7,
    enlarge_wl: f64,
) -> Result<ProposalCrop, EncodingError> {
    let enlarged = geometry::enlarge(proposal, enlarge_wl, enlarge_wl)?;
    let has_extras = !cloud.extras.is_empty();
    let mut points = Vec::new();
    let mut extras = Vec::new();
    for (i, &p) in cloud.points.iter().enumerate() {
        if geometry::contains(&enlarged, p) {
            points.push(geometry::to_canonical_point(proposal, p));
            if has_extras {
                extras.push(cloud.extras[i].clone());
            }
        }
    }
    let raw_count = points.len();
    Ok(ProposalCrop {
        proposal: *proposal,
        enlarge_wl,
        points: PointCloud {
            frame: cloud.frame,
            points,
            extras,
        },
        raw_count,
    })
}

/// Resamples a crop to exactly `n` points: a subset without replacement when
/// oversized, random repetition when undersized, all-zero sentinels when
/// empty. Deterministic for a given rng state.
pub fn sample_fixed(
    crop: &ProposalCrop,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProposalCrop, EncodingError> {
    if n == 0 {
        return Err(EncodingError::ZeroSample);
    }
    let raw = crop.raw_count;
    let has_extras = !crop.points.extras.is_empty();
    let extra_width = crop.points.extras.first().map(Vec::len).unwrap_or(0);

    let indices: Vec<usize> = if raw == 0 {
        Vec::new()
    } else if raw <= n {
        let mut idx: Vec<usize> = (0..raw).collect();
        idx.extend((0..n - raw).map(|_| rng.gen_range(0..raw)));
        idx
    } else {
        // partial Fisher-Yates, then restore original point order
        let mut pool: Vec<usize> = (0..raw).collect();
        for i in 0..n {
            let j = rng.gen_range(i..raw);
            pool.swap(i, j);
        }
        let mut chosen = pool[..n].to_vec();
        chosen.sort_unstable();
        chosen
    };

    let (points, extras) = if raw == 0 {
        let extras = if has_extras {
            vec![vec![0.0; extra_width]; n]
        } else {
            Vec::new()
        };
        (vec![Point3::default(); n], extras)
    } else {
        let points = indices.iter().map(|&i| crop.points.points[i]).collect();
        let extras = if has_extras {
            indices.iter().map(|&i| crop.points.extras[i].clone()).collect()
        } else {
            Vec::new()
        };
        (points, extras)
    };

    Ok(ProposalCrop {
        proposal: crop.proposal,
        enlarge_wl: crop.enlarge_wl,
        points: PointCloud {
            frame: crop.points.frame,
            points,
            extras,
        },
        raw_count: raw,
    })
}

/// A `rows x channels` per-point feature block for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    fn with_capacity(rows: usize, channels: usize) -> Self {
        Self {
            rows,
            channels,
            data: Vec::with_capacity(rows * channels),
        }
    }
}

/// Raw canonical coordinates; carries no size information at all.
pub fn encode_plain(crop: &ProposalCrop) -> FeatureMatrix {
    let mut m = FeatureMatrix::with_capacity(crop.points.len(), 3);
    for p in &crop.points.points {
        m.data.extend_from_slice(&[p.x, p.y, p.z]);
    }
    m
}

/// Coordinates divided by the proposal dims, aligning the un-enlarged
/// boundaries to -1/2 and 1/2.
pub fn encode_size_normalized(crop: &ProposalCrop) -> FeatureMatrix {
    let b = &crop.proposal;
    let mut m = FeatureMatrix::with_capacity(crop.points.len(), 3);
    for p in &crop.points.points {
        m.data.extend_from_slice(&[p.x / b.l, p.y / b.w, p.z / b.h]);
    }
    m
}

/// Canonical coordinates plus the per-class anchor dims appended to every
/// point; target encoding then uses the anchor dims as size denominators.
pub fn encode_anchor(
    crop: &ProposalCrop,
    class_hint: usize,
    anchors: &AnchorTable,
) -> Result<FeatureMatrix, EncodingError> {
    let [aw, al, ah] = anchors.get(class_hint)?;
    let mut m = FeatureMatrix::with_capacity(crop.points.len(), 6);
    for p in &crop.points.points {
        m.data.extend_from_slice(&[p.x, p.y, p.z, aw, al, ah]);
    }
    Ok(m)
}

/// Canonical coordinates plus signed distances to the six faces of the
/// un-enlarged proposal, so the network can locate the proposal's border.
pub fn encode_boundary_offset(crop: &ProposalCrop) -> FeatureMatrix {
    let b = &crop.proposal;
    let (hl, hw, hh) = (b.l * 0.5, b.w * 0.5, b.h * 0.5);
    let mut m = FeatureMatrix::with_capacity(crop.points.len(), 9);
    for p in &crop.points.points {
        m.data.extend_from_slice(&[
            p.x,
            p.y,
            p.z,
            p.x - hl,
            p.x + hl,
            p.y - hw,
            p.y + hw,
            p.z - hh,
            p.z + hh,
        ]);
    }
    m
}

/// Cell centers of a `grid^3` lattice spanning the un-enlarged proposal, in
/// the same canonical frame as the real points.
pub fn virtual_lattice(proposal: &Box7, grid: usize) -> Result<Vec<Point3>, EncodingError> {
    if grid < 2 {
        return Err(EncodingError::BadGrid(grid));
    }
    let cell = |extent: f64, i: usize| -extent * 0.5 + (i as f64 + 0.5) * extent / grid as f64;
    let mut pts = Vec::with_capacity(grid * grid * grid);
    for ix in 0..grid {
        for iy in 0..grid {
            for iz in 0..grid {
                pts.push(Point3::new(
                    cell(proposal.l, ix),
                    cell(proposal.w, iy),
                    cell(proposal.h, iz),
                ));
            }
        }
    }
    Ok(pts)
}

/// Real points flagged 1 followed by `grid^3` virtual lattice points flagged
/// 0; the virtual coordinates share the real points' canonical frame.
pub fn encode_virtual_points(crop: &ProposalCrop, grid: usize) -> Result<FeatureMatrix, EncodingError> {
    let lattice = virtual_lattice(&crop.proposal, grid)?;
    let mut m = FeatureMatrix::with_capacity(crop.points.len() + lattice.len(), 4);
    for p in &crop.points.points {
        m.data.extend_from_slice(&[p.x, p.y, p.z, 1.0]);
    }
    for p in &lattice {
        m.data.extend_from_slice(&[p.x, p.y, p.z, 0.0]);
    }
    m.rows = crop.points.len() + lattice.len();
    Ok(m)
}

/// Point-to-voxel assignment over the enlarged proposal extent. Per-voxel
/// point lists are retained for a per-voxel feature extractor; pooling an
/// empty voxel yields zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub grid: usize,
    /// Canonical-frame extents `(x, y, z)` of the enlarged proposal.
    pub extent: [f64; 3],
    pub point_lists: Vec<Vec<u32>>,
}

impl VoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.grid * self.grid * self.grid
    }

    pub fn voxel_index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.grid + v[1]) * self.grid + v[2]
    }

    /// Componentwise max over each voxel's points; empty voxels stay zero.
    pub fn pooled_features(&self, per_point: &FeatureMatrix) -> Vec<f64> {
        let ch = per_point.channels;
        let mut out = vec![0.0; self.num_voxels() * ch];
        for (v, list) in self.point_lists.iter().enumerate() {
            for (slot, &p) in list.iter().enumerate() {
                let row = &per_point.data[p as usize * ch..(p as usize + 1) * ch];
                let cell = &mut out[v * ch..(v + 1) * ch];
                for (o, &x) in cell.iter_mut().zip(row) {
                    if slot == 0 || x > *o {
                        *o = x;
                    }
                }
            }
        }
        out
    }

    pub fn occupancy(&self) -> Vec<f64> {
        self.point_lists
            .iter()
            .map(|l| if l.is_empty() { 0.0 } else { 1.0 })
            .collect()
    }
}

/// Assigns each sampled point to the voxel containing it within the enlarged
/// proposal extent; points on the upper boundary clamp to the last voxel.
/// Empty crops produce an all-empty grid (sentinel points are not binned).
pub fn voxelize(crop: &ProposalCrop, grid: usize) -> VoxelGrid {
    let b = &crop.proposal;
    let extent = [b.l + crop.enlarge_wl, b.w + crop.enlarge_wl, b.h];
    let mut point_lists = vec![Vec::new(); grid * grid * grid];
    if !crop.is_empty() {
        let bin = |coord: f64, ext: f64| -> usize {
            let idx = ((coord + ext * 0.5) / ext * grid as f64).floor();
            (idx.max(0.0) as usize).min(grid - 1)
        };
        for (i, p) in crop.points.points.iter().enumerate() {
            let v = [bin(p.x, extent[0]), bin(p.y, extent[1]), bin(p.z, extent[2])];
            point_lists[(v[0] * grid + v[1]) * grid + v[2]].push(i as u32);
        }
    }
    VoxelGrid {
        grid,
        extent,
        point_lists,
    }
}

/// Encoder settings shared by training and refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub points_per_proposal: usize,
    pub enlarge_wl: f64,
    pub virtual_grid: usize,
    pub voxel_grid: usize,
    pub anchors: AnchorTable,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BoundaryOffset,
            points_per_proposal: 512,
            enlarge_wl: 1.0,
            virtual_grid: 4,
            voxel_grid: 14,
            anchors: AnchorTable::default(),
        }
    }
}

impl EncoderConfig {
    /// Rows each proposal contributes to a batch.
    pub fn rows_per_proposal(&self) -> usize {
        match self.variant {
            Variant::VirtualPoints => {
                self.points_per_proposal + self.virtual_grid.pow(3)
            }
            _ => self.points_per_proposal,
        }
    }

    pub fn channels(&self) -> usize {
        self.variant.channels()
    }
}

/// Fixed-size feature tensor for a batch of proposals, ready for the
/// network. `anchor_dims` is set in anchor mode so target encoding and
/// decoding swap in the anchor denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub variant: Variant,
    pub channels: usize,
    pub points_per_proposal: usize,
    pub features: Vec<f64>,
    pub proposals: Vec<Box7>,
    pub empty: Vec<bool>,
    pub anchor_dims: Option<Vec<[f64; 3]>>,
}

impl EncodedBatch {
    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn proposal_features(&self, i: usize) -> &[f64] {
        let stride = self.points_per_proposal * self.channels;
        &self.features[i * stride..(i + 1) * stride]
    }
}

/// Encodes already-sampled crops into one batch. `class_hints` (one per
/// crop) is required for the anchor variant and ignored otherwise.
pub fn encode_batch(
    crops: &[ProposalCrop],
    class_hints: Option<&[usize]>,
    config: &EncoderConfig,
) -> Result<EncodedBatch, EncodingError> {
    let n = config.points_per_proposal;
    let rows = config.rows_per_proposal();
    let channels = config.channels();
    let mut features = Vec::with_capacity(crops.len() * rows * channels);
    let mut proposals = Vec::with_capacity(crops.len());
    let mut empty = Vec::with_capacity(crops.len());
    let mut anchor_dims = if config.variant == Variant::Anchor {
        Some(Vec::with_capacity(crops.len()))
    } else {
        None
    };

    for (i, crop) in crops.iter().enumerate() {
        if crop.points.len() != n {
            return Err(EncodingError::InconsistentCrop {
                expected: n,
                found: crop.points.len(),
            });
        }
        let m = match config.variant {
            Variant::Plain => encode_plain(crop),
            Variant::SizeNormalized => encode_size_normalized(crop),
            Variant::Anchor => {
                let hints = class_hints.ok_or(EncodingError::MissingClassHints)?;
                let class = *hints.get(i).ok_or(EncodingError::MissingClassHints)?;
                let dims = config.anchors.get(class)?;
                if let Some(list) = anchor_dims.as_mut() {
                    list.push(dims);
                }
                encode_anchor(crop, class, &config.anchors)?
            }
            Variant::BoundaryOffset => encode_boundary_offset(crop),
            Variant::VirtualPoints => encode_virtual_points(crop, config.virtual_grid)?,
        };
        debug_assert_eq!(m.rows, rows);
        debug_assert_eq!(m.channels, channels);
        features.extend_from_slice(&m.data);
        proposals.push(crop.proposal);
        empty.push(crop.is_empty());
    }

    Ok(EncodedBatch {
        variant: config.variant,
        channels,
        points_per_proposal: rows,
        features,
        proposals,
        empty,
        anchor_dims,
    })
}
