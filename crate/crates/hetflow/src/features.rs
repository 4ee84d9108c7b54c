//! Vertex feature storage in both layouts, the reorganization between
//! them, and the gather/concatenate steps that build merged aggregation
//! inputs.
//!
//! Index-major interleaves rows of all vertex types in one flat buffer
//! (the homogeneous-graph convention); type-major stores one contiguous
//! block per vertex type, ordered by local id. Reorganization happens
//! once per graph load, not per batch.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::device::{DeviceError, DeviceQueue, KernelDesc, Locality, Stage};
use crate::graph::{HeteroGraph, TypeId};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("vertex id {id} out of range for type {ty}")]
    IdOutOfRange { ty: TypeId, id: u32 },
    #[error("inconsistent segment bases: dst segment {seg} >= segment count {count}")]
    SegmentOutOfRange { seg: u32, count: usize },
    #[error("feature dim mismatch: expected {expected}, relation {relation} has {got}")]
    DimMismatch {
        relation: usize,
        expected: usize,
        got: usize,
    },
    #[error("feature file size {got} bytes does not match expected {want}")]
    FileSize { got: usize, want: usize },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything the aggregation path can gather per-relation source rows from:
/// the feature store itself (layer 0) or intermediate per-type matrices.
pub trait FeatureSource<F: Scalar> {
    fn dim(&self, ty: TypeId) -> usize;
    fn rows(&self, ty: TypeId) -> usize;
    fn row(&self, ty: TypeId, id: u32) -> ArrayView1<'_, F>;
    /// One index-select kernel; zero-size gathers are skipped (no launch).
    fn gather(
        &self,
        ty: TypeId,
        ids: &[u32],
        device: &DeviceQueue,
        desc: KernelDesc,
    ) -> Result<Array2<F>, FeatureError> {
        let dim = self.dim(ty);
        for &id in ids {
            if (id as usize) >= self.rows(ty) {
                return Err(FeatureError::IdOutOfRange { ty, id });
            }
        }
        if ids.is_empty() {
            return Ok(Array2::zeros((0, dim)));
        }
        let bytes = (ids.len() * dim * F::BYTES) as u64;
        let desc = self.annotate(ty, ids, desc.bytes(bytes, bytes));
        let out = device.submit(desc, || {
            let mut m = Array2::zeros((ids.len(), dim));
            for (k, &id) in ids.iter().enumerate() {
                m.row_mut(k).assign(&self.row(ty, id));
            }
            m
        })?;
        Ok(out)
    }
    /// Attaches layout-specific locality metadata to a gather kernel.
    fn annotate(&self, _ty: TypeId, _ids: &[u32], desc: KernelDesc) -> KernelDesc {
        desc
    }
}

/// Plain per-type matrices (intermediate layer representations).
#[derive(Debug, Clone)]
pub struct TypedFeatures<F> {
    pub blocks: Vec<Array2<F>>,
}

impl<F: Scalar> FeatureSource<F> for TypedFeatures<F> {
    fn dim(&self, ty: TypeId) -> usize {
        self.blocks[ty].ncols()
    }
    fn rows(&self, ty: TypeId) -> usize {
        self.blocks[ty].nrows()
    }
    fn row(&self, ty: TypeId, id: u32) -> ArrayView1<'_, F> {
        self.blocks[ty].row(id as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    IndexMajor,
    TypeMajor,
}

#[derive(Debug, Clone)]
pub struct FeatureStore<F> {
    layout: Layout,
    /// Type-major blocks; in index-major mode this is empty.
    blocks: Vec<Array2<F>>,
    /// Index-major flat storage (rows may have per-type widths).
    data: Vec<F>,
    row_offset: Vec<usize>,
    /// Index-major row -> (type, local id).
    rows: Vec<(TypeId, u32)>,
    /// (type, local id) -> index-major row.
    row_of: Vec<Vec<u32>>,
    dims: Vec<usize>,
    counts: Vec<usize>,
    /// Type-major global row -> index-major row (identity when the store
    /// was born type-major).
    perm: Vec<u32>,
    /// Row base of each type block in the type-major concatenation.
    type_base: Vec<usize>,
}

fn type_bases(counts: &[usize]) -> Vec<usize> {
    let mut base = Vec::with_capacity(counts.len());
    let mut acc = 0;
    for &c in counts {
        base.push(acc);
        acc += c;
    }
    base
}

impl<F: Scalar> FeatureStore<F> {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn type_base(&self) -> &[usize] {
        &self.type_base
    }

    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    /// Deterministic standard-normal fill in index-major layout; rows of
    /// all types interleaved round-robin by local id.
    pub fn random_index_major(g: &HeteroGraph, seed: u64) -> Self {
        let dims: Vec<usize> = g.vertex_types.iter().map(|t| t.feature_dim).collect();
        let counts: Vec<usize> = g.vertex_types.iter().map(|t| t.count).collect();
        let t = counts.len();
        let mut rows = Vec::with_capacity(counts.iter().sum());
        let max_count = counts.iter().copied().max().unwrap_or(0);
        for local in 0..max_count {
            for ty in 0..t {
                if local < counts[ty] {
                    rows.push((ty, local as u32));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut row_offset = Vec::with_capacity(rows.len() + 1);
        let mut row_of: Vec<Vec<u32>> = counts.iter().map(|&c| vec![0; c]).collect();
        row_offset.push(0);
        for (i, &(ty, local)) in rows.iter().enumerate() {
            row_of[ty][local as usize] = i as u32;
            for _ in 0..dims[ty] {
                data.push(F::sample_normal(&mut rng));
            }
            row_offset.push(data.len());
        }
        Self {
            layout: Layout::IndexMajor,
            blocks: Vec::new(),
            data,
            row_offset,
            rows,
            row_of,
            type_base: type_bases(&counts),
            dims,
            counts,
            perm: Vec::new(),
        }
    }

    /// Builds a type-major store directly from per-type blocks.
    pub fn from_blocks(blocks: Vec<Array2<F>>) -> Self {
        let dims: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
        let counts: Vec<usize> = blocks.iter().map(|b| b.nrows()).collect();
        let total: usize = counts.iter().sum();
        Self {
            layout: Layout::TypeMajor,
            blocks,
            data: Vec::new(),
            row_offset: Vec::new(),
            rows: Vec::new(),
            row_of: Vec::new(),
            type_base: type_bases(&counts),
            dims,
            counts,
            perm: (0..total as u32).collect(),
        }
    }

    /// Rewrites an index-major store into type-major blocks. Logical
    /// content is preserved bitwise; `perm` maps type-major rows back to
    /// the original index-major rows.
    pub fn reorganize(&self) -> Self {
        assert_eq!(self.layout, Layout::IndexMajor, "reorganize expects index-major input");
        let t = self.counts.len();
        let mut blocks = Vec::with_capacity(t);
        let mut perm = Vec::with_capacity(self.rows.len());
        for ty in 0..t {
            let mut block = Array2::zeros((self.counts[ty], self.dims[ty]));
            for local in 0..self.counts[ty] {
                let row = self.row_of[ty][local] as usize;
                perm.push(row as u32);
                let lo = self.row_offset[row];
                let hi = self.row_offset[row + 1];
                for (j, &v) in self.data[lo..hi].iter().enumerate() {
                    block[(local, j)] = v;
                }
            }
            blocks.push(block);
        }
        Self {
            layout: Layout::TypeMajor,
            blocks,
            data: Vec::new(),
            row_offset: Vec::new(),
            rows: Vec::new(),
            row_of: Vec::new(),
            type_base: type_bases(&self.counts),
            dims: self.dims.clone(),
            counts: self.counts.clone(),
            perm,
        }
    }

    pub fn lookup(&self, ty: TypeId, id: u32) -> ArrayView1<'_, F> {
        self.row(ty, id)
    }

    /// Type-major binary dump: blocks in type order, rows in local-id
    /// order, little-endian elements.
    pub fn save_binary(&self, path: &std::path::Path) -> Result<(), FeatureError> {
        let mut out = Vec::new();
        for ty in 0..self.counts.len() {
            for id in 0..self.counts[ty] {
                for &v in self.row(ty, id as u32).iter() {
                    v.write_le(&mut out);
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_binary(g: &HeteroGraph, path: &std::path::Path) -> Result<Self, FeatureError> {
        let bytes = std::fs::read(path)?;
        Self::from_binary(g, &bytes)
    }

    pub fn from_binary(g: &HeteroGraph, bytes: &[u8]) -> Result<Self, FeatureError> {
        let want: usize = g
            .vertex_types
            .iter()
            .map(|t| t.count * t.feature_dim * F::BYTES)
            .sum();
        if bytes.len() != want {
            return Err(FeatureError::FileSize {
                got: bytes.len(),
                want,
            });
        }
        let mut blocks = Vec::with_capacity(g.num_types());
        let mut off = 0;
        for t in &g.vertex_types {
            let mut block = Array2::zeros((t.count, t.feature_dim));
            for i in 0..t.count {
                for j in 0..t.feature_dim {
                    block[(i, j)] = F::from_le_slice(&bytes[off..off + F::BYTES]);
                    off += F::BYTES;
                }
            }
            blocks.push(block);
        }
        Ok(Self::from_blocks(blocks))
    }

    pub fn as_typed(&self) -> &[Array2<F>] {
        assert_eq!(self.layout, Layout::TypeMajor);
        &self.blocks
    }
}

impl<F: Scalar> FeatureSource<F> for FeatureStore<F> {
    fn dim(&self, ty: TypeId) -> usize {
        self.dims[ty]
    }
    fn rows(&self, ty: TypeId) -> usize {
        self.counts[ty]
    }
    fn row(&self, ty: TypeId, id: u32) -> ArrayView1<'_, F> {
        match self.layout {
            Layout::TypeMajor => self.blocks[ty].row(id as usize),
            Layout::IndexMajor => {
                let row = self.row_of[ty][id as usize] as usize;
                let lo = self.row_offset[row];
                ArrayView1::from(&self.data[lo..lo + self.dims[ty]])
            }
        }
    }
    fn annotate(&self, ty: TypeId, ids: &[u32], desc: KernelDesc) -> KernelDesc {
        // Global row coordinates: type-major rows live inside one type
        // block; index-major rows span the whole interleaved matrix.
        let (coord, block_start, block_end): (Box<dyn Fn(u32) -> u64>, u64, u64) =
            match self.layout {
                Layout::TypeMajor => (
                    Box::new(move |id| id as u64),
                    0,
                    self.counts[ty] as u64,
                ),
                Layout::IndexMajor => (
                    Box::new(move |id| self.row_of[ty][id as usize] as u64),
                    0,
                    self.rows.len() as u64,
                ),
            };
        let mut min_row = u64::MAX;
        let mut max_row = 0;
        for &id in ids {
            let r = coord(id);
            min_row = min_row.min(r);
            max_row = max_row.max(r);
        }
        desc.locality(Locality {
            min_row,
            max_row,
            block_start,
            block_end,
            block_id: ty as u32,
        })
    }
}

/// Gathers feature rows for `ids` of one vertex type as a single
/// index-select kernel. Requires the type-major layout.
pub fn gather_features<F: Scalar>(
    fs: &FeatureStore<F>,
    ty: TypeId,
    ids: &[u32],
    device: &DeviceQueue,
) -> Result<Array2<F>, FeatureError> {
    assert_eq!(fs.layout(), Layout::TypeMajor, "gather_features expects type-major layout");
    fs.gather(
        ty,
        ids,
        device,
        KernelDesc::new("index_select_features", Stage::NeighborAggregation),
    )
}

/// One layer's merged aggregation input (Fig. 5(b) form): all relations'
/// gathered source features concatenated row-wise, with destination
/// segment ids aligned per row.
#[derive(Debug, Clone)]
pub struct MergedAggregationInput<F> {
    pub feature_cat: Array2<F>,
    pub dst_index_cat: Vec<u32>,
    pub segment_count: usize,
    pub relation_offsets: Vec<usize>,
}

/// Concatenates per-relation (features, segment ids) pairs with two
/// concat kernels. `parts` must be in relation id order with empty
/// relations already dropped.
pub fn merge_relation_parts<F: Scalar>(
    parts: Vec<(u32, Array2<F>, Vec<u32>)>,
    all_relations: usize,
    segment_count: usize,
    device: &DeviceQueue,
    batch: Option<u32>,
    layer: Option<u32>,
) -> Result<MergedAggregationInput<F>, FeatureError> {
    let dim = parts.first().map(|(_, m, _)| m.ncols()).unwrap_or(0);
    let mut relation_offsets = Vec::with_capacity(all_relations + 1);
    relation_offsets.push(0);
    let mut total = 0usize;
    {
        let mut iter = parts.iter().peekable();
        for rel in 0..all_relations {
            if let Some((r, m, idx)) = iter.peek() {
                if *r as usize == rel {
                    if m.ncols() != dim {
                        return Err(FeatureError::DimMismatch {
                            relation: rel,
                            expected: dim,
                            got: m.ncols(),
                        });
                    }
                    for &seg in idx {
                        if seg as usize >= segment_count {
                            return Err(FeatureError::SegmentOutOfRange {
                                seg,
                                count: segment_count,
                            });
                        }
                    }
                    total += m.nrows();
                    iter.next();
                }
            }
            relation_offsets.push(total);
        }
    }
    let bytes = (total * dim * F::BYTES) as u64;
    let mut fdesc = KernelDesc::new("concat_features", Stage::NeighborAggregation).bytes(bytes, bytes);
    fdesc.batch = batch;
    fdesc.layer = layer;
    let feature_cat = device.submit(fdesc, || {
        let mut m = Array2::zeros((total, dim));
        let mut row = 0;
        for (_, part, _) in &parts {
            for r in part.rows() {
                m.row_mut(row).assign(&r);
                row += 1;
            }
        }
        m
    })?;
    let mut idesc = KernelDesc::new("concat_indices", Stage::NeighborAggregation)
        .bytes(4 * total as u64, 4 * total as u64);
    idesc.batch = batch;
    idesc.layer = layer;
    let dst_index_cat = device.submit(idesc, || {
        let mut v = Vec::with_capacity(total);
        for (_, _, idx) in &parts {
            v.extend_from_slice(idx);
        }
        v
    })?;
    Ok(MergedAggregationInput {
        feature_cat,
        dst_index_cat,
        segment_count,
        relation_offsets,
    })
}

/// Algorithm-1 style merged input over raw stored features: iterates
/// relations in id order, gathers each relation's source rows, offsets
/// destination ids by the destination type's segment base, and
/// concatenates once. Kernel trace shows one gather per nonempty relation
/// plus two concat launches.
pub fn build_merged_input<F: Scalar, S: FeatureSource<F>>(
    sgs: &crate::semantic::SemanticGraphSet,
    layer: usize,
    source: &S,
    dst_segment_base: &[usize],
    segment_count: usize,
    device: &DeviceQueue,
) -> Result<MergedAggregationInput<F>, FeatureError> {
    let mut parts = Vec::new();
    for (rel, edges) in sgs.layers[layer].iter().enumerate() {
        if edges.src_index.is_empty() {
            continue;
        }
        let (src_ty, dst_ty) = sgs.rel_types[rel];
        let feats = source.gather(
            src_ty,
            &edges.src_index,
            device,
            KernelDesc::new("index_select_features", Stage::NeighborAggregation)
                .layer(layer as u32)
                .relation(rel as u32),
        )?;
        let base = dst_segment_base[dst_ty] as u32;
        let segs: Vec<u32> = edges.dst_index.iter().map(|&d| base + d).collect();
        parts.push((rel as u32, feats, segs));
    }
    merge_relation_parts(
        parts,
        sgs.layers[layer].len(),
        segment_count,
        device,
        None,
        Some(layer as u32),
    )
}
