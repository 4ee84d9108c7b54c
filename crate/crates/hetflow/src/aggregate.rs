//! Segment-reduction kernels for neighbor aggregation.
//!
//! Two forward paths with identical semantics: per-relation (one scatter +
//! one gather kernel per nonempty semantic graph) and merged (a single
//! aggregation kernel over the concatenated input).

use ndarray::Array2;
use thiserror::Error;

use crate::device::{DeviceError, DeviceQueue, KernelDesc, Stage};
use crate::features::{FeatureError, FeatureSource, MergedAggregationInput};
use crate::semantic::SemanticGraphSet;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
pub struct AggregationOutput<F> {
    pub values: Array2<F>,
    pub degrees: Vec<u32>,
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("segment id {seg} out of range (count {count})")]
    SegmentOutOfRange { seg: u32, count: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Plain segment sum plus per-segment degrees; zero-degree segments are
/// exactly zero rows.
pub fn segment_sum<F: Scalar>(
    features: &Array2<F>,
    dst_index: &[u32],
    segment_count: usize,
) -> Result<(Array2<F>, Vec<u32>), AggregateError> {
    if features.nrows() != dst_index.len() {
        return Err(AggregateError::ShapeMismatch(format!(
            "{} feature rows vs {} segment ids",
            features.nrows(),
            dst_index.len()
        )));
    }
    let mut out = Array2::zeros((segment_count, features.ncols()));
    let mut degrees = vec![0u32; segment_count];
    for (k, &seg) in dst_index.iter().enumerate() {
        if seg as usize >= segment_count {
            return Err(AggregateError::SegmentOutOfRange {
                seg,
                count: segment_count,
            });
        }
        let mut row = out.row_mut(seg as usize);
        row += &features.row(k);
        degrees[seg as usize] += 1;
    }
    Ok((out, degrees))
}

fn apply_reducer<F: Scalar>(sums: &mut Array2<F>, degrees: &[u32], reducer: Reducer) {
    if reducer == Reducer::Mean {
        for (i, &deg) in degrees.iter().enumerate() {
            if deg > 0 {
                let inv = F::one() / F::from_f64(deg as f64);
                let mut row = sums.row_mut(i);
                row *= inv;
            }
        }
    }
}

/// Fig. 5(a) baseline: each nonempty semantic graph gets its own feature
/// gather plus scatter and gather aggregation kernels. Output j equals the
/// brute-force edge loop over relation j; empty relations produce all-zero
/// outputs without any launch.
pub fn aggregate_per_relation<F: Scalar, S: FeatureSource<F>>(
    sgs: &SemanticGraphSet,
    layer: usize,
    source: &S,
    dst_counts: &[usize],
    reducer: Reducer,
    device: &DeviceQueue,
) -> Result<Vec<AggregationOutput<F>>, AggregateError> {
    let mut outputs = Vec::with_capacity(sgs.layers[layer].len());
    for (rel, edges) in sgs.layers[layer].iter().enumerate() {
        let (src_ty, dst_ty) = sgs.rel_types[rel];
        let segs = dst_counts[dst_ty];
        if edges.src_index.is_empty() {
            outputs.push(AggregationOutput {
                values: Array2::zeros((segs, source.dim(src_ty))),
                degrees: vec![0; segs],
            });
            continue;
        }
        let feats = source.gather(
            src_ty,
            &edges.src_index,
            device,
            KernelDesc::new("index_select_features", Stage::NeighborAggregation)
                .layer(layer as u32)
                .relation(rel as u32),
        )?;
        let bytes = (feats.len() * F::BYTES) as u64;
        let scatter = device.submit(
            KernelDesc::new("scatter", Stage::NeighborAggregation)
                .layer(layer as u32)
                .relation(rel as u32)
                .bytes(bytes, bytes),
            || segment_sum(&feats, &edges.dst_index, segs),
        )??;
        let (mut sums, degrees) = scatter;
        let out_bytes = (sums.len() * F::BYTES) as u64;
        device.submit(
            KernelDesc::new("gather", Stage::NeighborAggregation)
                .layer(layer as u32)
                .relation(rel as u32)
                .bytes(out_bytes, out_bytes),
            || apply_reducer(&mut sums, &degrees, reducer),
        )?;
        outputs.push(AggregationOutput {
            values: sums,
            degrees,
        });
    }
    Ok(outputs)
}

/// Fig. 5(b) merged path: exactly one aggregation kernel regardless of the
/// number of relations.
pub fn aggregate_merged<F: Scalar>(
    mi: &MergedAggregationInput<F>,
    reducer: Reducer,
    device: &DeviceQueue,
) -> Result<AggregationOutput<F>, AggregateError> {
    let bytes = (mi.feature_cat.len() * F::BYTES) as u64;
    let result = device.submit(
        KernelDesc::new("aggregate_segment", Stage::NeighborAggregation).bytes(bytes, bytes),
        || -> Result<AggregationOutput<F>, AggregateError> {
            let (mut sums, degrees) =
                segment_sum(&mi.feature_cat, &mi.dst_index_cat, mi.segment_count)?;
            apply_reducer(&mut sums, &degrees, reducer);
            Ok(AggregationOutput {
                values: sums,
                degrees,
            })
        },
    )??;
    Ok(result)
}

/// Gradient of the segment reduction with respect to its input rows:
/// row k receives grad_out[segment(k)], divided by the segment degree for
/// the mean reducer.
pub fn aggregate_backward<F: Scalar>(
    grad_out: &Array2<F>,
    dst_index: &[u32],
    degrees: &[u32],
    reducer: Reducer,
) -> Result<Array2<F>, AggregateError> {
    if grad_out.nrows() != degrees.len() {
        return Err(AggregateError::ShapeMismatch(format!(
            "{} grad rows vs {} segments",
            grad_out.nrows(),
            degrees.len()
        )));
    }
    let mut grad_in = Array2::zeros((dst_index.len(), grad_out.ncols()));
    for (k, &seg) in dst_index.iter().enumerate() {
        if seg as usize >= degrees.len() {
            return Err(AggregateError::SegmentOutOfRange {
                seg,
                count: degrees.len(),
            });
        }
        let scale = match reducer {
            Reducer::Sum => F::one(),
            Reducer::Mean => F::one() / F::from_f64(degrees[seg as usize].max(1) as f64),
        };
        let mut row = grad_in.row_mut(k);
        row.assign(&grad_out.row(seg as usize));
        row *= scale;
    }
    Ok(grad_in)
}
