//! Forward pass for both models and both execution paths.

use ndarray::{s, Array1, Array2};

use crate::aggregate::segment_sum;
use crate::device::{DeviceQueue, KernelDesc, Stage};
use crate::features::{merge_relation_parts, FeatureSource, FeatureStore, TypedFeatures};
use crate::model::{seed_positions, ExecPath, ModelError, ModelKind, ModelParams};
use crate::sampler::MiniBatch;
use crate::semantic::SemanticGraphSet;
use crate::Scalar;

/// Per-relation intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RelCache<F> {
    /// Gathered source rows, one per edge.
    pub x: Array2<F>,
    /// Projected rows (unscaled), one per edge.
    pub p: Array2<F>,
    /// In-degree of each destination segment within this relation.
    pub degrees: Vec<u32>,
    /// RGAT: pre-activation attention logits per edge.
    pub z: Option<Vec<F>>,
    /// RGAT: normalized attention weights per edge.
    pub alpha: Option<Vec<F>>,
    /// RGAT: gathered projected destination rows per edge.
    pub q: Option<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    /// Per type: input rows for the destination prefix.
    pub self_in: Vec<Array2<F>>,
    /// Per type: self-projection S_t = self_in . w_self.
    pub self_out: Vec<Array2<F>>,
    pub rel: Vec<Option<RelCache<F>>>,
    /// Per type: fused output before the nonlinearity.
    pub preact: Vec<Array2<F>>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub layers: Vec<LayerCache<F>>,
    /// One row per seed, `num_classes` columns.
    pub logits: Array2<F>,
}

/// Layer input: the feature store for layer 0 (graph-local ids via the
/// block's vertex map), per-type activation matrices afterwards.
enum LayerSource<'a, F: Scalar> {
    Store(&'a FeatureStore<F>),
    Typed(&'a TypedFeatures<F>),
}

impl<'a, F: Scalar> LayerSource<'a, F> {
    fn gather(
        &self,
        ty: usize,
        batch_local_ids: &[u32],
        vertex_map: &[Vec<u32>],
        device: &DeviceQueue,
        desc: KernelDesc,
    ) -> Result<Array2<F>, ModelError> {
        match self {
            LayerSource::Store(fs) => {
                let gids: Vec<u32> = batch_local_ids
                    .iter()
                    .map(|&i| vertex_map[ty][i as usize])
                    .collect();
                Ok(fs.gather(ty, &gids, device, desc)?)
            }
            LayerSource::Typed(tf) => Ok(tf.gather(ty, batch_local_ids, device, desc)?),
        }
    }
}

fn leaky<F: Scalar>(z: F, slope: F) -> F {
    if z > F::zero() {
        z
    } else {
        slope * z
    }
}

pub fn forward<F: Scalar>(
    batch: &MiniBatch,
    sgs: &SemanticGraphSet,
    store: &FeatureStore<F>,
    params: &ModelParams<F>,
    path: ExecPath,
    device: &DeviceQueue,
    batch_id: Option<u32>,
) -> Result<ForwardCache<F>, ModelError> {
    let num_types = params.in_dims.len();
    let num_rel = sgs.rel_types.len();
    if batch.layers.len() != params.layers.len() {
        return Err(ModelError::DimMismatch(format!(
            "batch has {} layers, model has {}",
            batch.layers.len(),
            params.layers.len()
        )));
    }
    let desc = |name: &'static str, stage: Stage, layer: usize| {
        let mut d = KernelDesc::new(name, stage).layer(layer as u32);
        d.batch = batch_id;
        d
    };
    let mut cache_layers: Vec<LayerCache<F>> = Vec::with_capacity(batch.layers.len());
    let mut prev: Option<TypedFeatures<F>> = None;
    for (li, block) in batch.layers.iter().enumerate() {
        let lp = &params.layers[li];
        let out_dim = lp.w_self[0].ncols();
        let source = match &prev {
            None => LayerSource::Store(store),
            Some(h) => LayerSource::Typed(h),
        };
        // Self inputs: destination-prefix rows per type.
        let mut self_in = Vec::with_capacity(num_types);
        for t in 0..num_types {
            let k = block.dst_counts[t];
            let m = match &source {
                LayerSource::Store(_) => {
                    let ids: Vec<u32> = (0..k as u32).collect();
                    source.gather(
                        t,
                        &ids,
                        &block.vertex_map,
                        device,
                        KernelDesc::new("index_select_features", Stage::NeighborAggregation)
                            .layer(li as u32),
                    )?
                }
                LayerSource::Typed(h) => h.blocks[t].slice(s![..k, ..]).to_owned(),
            };
            self_in.push(m);
        }
        // Self projection S_t (also the projected destination rows that
        // RGAT scores against).
        let mut self_out = Vec::with_capacity(num_types);
        for t in 0..num_types {
            let k = block.dst_counts[t];
            if k == 0 {
                self_out.push(Array2::zeros((0, out_dim)));
                continue;
            }
            let w = &lp.w_self[t];
            if self_in[t].ncols() != w.nrows() {
                return Err(ModelError::DimMismatch(format!(
                    "self weight for type {t}: input dim {} vs {}",
                    self_in[t].ncols(),
                    w.nrows()
                )));
            }
            let x = &self_in[t];
            let s = device.submit(
                desc("matmul_self", Stage::FeatureProjection, li)
                    .bytes((x.len() * F::BYTES) as u64, (k * out_dim * F::BYTES) as u64),
                || x.dot(w),
            )?;
            self_out.push(s);
        }
        // Segment bases across destination types (merged path).
        let mut seg_base = Vec::with_capacity(num_types);
        let mut total_segments = 0usize;
        for t in 0..num_types {
            seg_base.push(total_segments);
            total_segments += block.dst_counts[t];
        }
        let mut fused: Vec<Array2<F>> = (0..num_types)
            .map(|t| Array2::zeros((block.dst_counts[t], out_dim)))
            .collect();
        let mut rel_caches: Vec<Option<RelCache<F>>> = vec![None; num_rel];
        let mut merged_parts: Vec<(u32, Array2<F>, Vec<u32>)> = Vec::new();
        for rel in 0..num_rel {
            let edges = &sgs.layers[li][rel];
            if edges.src_index.is_empty() {
                continue;
            }
            let (sty, dty) = sgs.rel_types[rel];
            let x = source.gather(
                sty,
                &edges.src_index,
                &block.vertex_map,
                device,
                KernelDesc::new("index_select_features", Stage::NeighborAggregation)
                    .layer(li as u32)
                    .relation(rel as u32),
            )?;
            let w = &lp.w_rel[rel];
            let b = &lp.b_rel[rel];
            if x.ncols() != w.nrows() {
                return Err(ModelError::DimMismatch(format!(
                    "relation {rel}: input dim {} vs weight rows {}",
                    x.ncols(),
                    w.nrows()
                )));
            }
            let mut degrees = vec![0u32; block.dst_counts[dty]];
            for &d in &edges.dst_index {
                degrees[d as usize] += 1;
            }
            let p = {
                let xr = &x;
                device.submit(
                    desc("matmul_project", Stage::FeatureProjection, li)
                        .relation(rel as u32)
                        .bytes(
                            (xr.len() * F::BYTES) as u64,
                            (xr.nrows() * out_dim * F::BYTES) as u64,
                        ),
                    || xr.dot(w) + b,
                )?
            };
            let mut rc = RelCache {
                x,
                p,
                degrees,
                z: None,
                alpha: None,
                q: None,
            };
            // Per-edge weights: 1/deg for the RGCN mean, attention for RGAT.
            let edge_weights: Option<Vec<F>> = match params.kind {
                ModelKind::Rgcn => match path {
                    ExecPath::Merged => Some(
                        edges
                            .dst_index
                            .iter()
                            .map(|&d| F::one() / F::from_f64(rc.degrees[d as usize] as f64))
                            .collect(),
                    ),
                    ExecPath::PerRelation => None,
                },
                ModelKind::Rgat => {
                    let attn = &lp.attn.as_ref().expect("rgat attention params")[rel];
                    let s_out_d = &self_out[dty];
                    let dst_ids = &edges.dst_index;
                    let q = device.submit(
                        desc("index_select_features", Stage::NeighborAggregation, li)
                            .relation(rel as u32),
                        || {
                            let mut m = Array2::zeros((dst_ids.len(), out_dim));
                            for (k, &d) in dst_ids.iter().enumerate() {
                                m.row_mut(k).assign(&s_out_d.row(d as usize));
                            }
                            m
                        },
                    )?;
                    let slope = params.leaky_slope;
                    let pm = &rc.p;
                    let e: Vec<F> = device.submit(
                        desc("attn_logits", Stage::NeighborAggregation, li).relation(rel as u32),
                        || {
                            (0..pm.nrows())
                                .map(|k| pm.row(k).dot(&attn.a_src) + q.row(k).dot(&attn.a_dst))
                                .collect()
                        },
                    )?;
                    let segs = block.dst_counts[dty];
                    let alpha: Vec<F> = device.submit(
                        desc("attn_softmax", Stage::NeighborAggregation, li).relation(rel as u32),
                        || {
                            let act: Vec<F> = e.iter().map(|&z| leaky(z, slope)).collect();
                            let mut seg_max = vec![F::from_f64(f64::NEG_INFINITY); segs];
                            for (k, &d) in dst_ids.iter().enumerate() {
                                let d = d as usize;
                                if act[k] > seg_max[d] {
                                    seg_max[d] = act[k];
                                }
                            }
                            let exps: Vec<F> = act
                                .iter()
                                .zip(dst_ids)
                                .map(|(&a, &d)| (a - seg_max[d as usize]).exp())
                                .collect();
                            let mut seg_sum = vec![F::zero(); segs];
                            for (k, &d) in dst_ids.iter().enumerate() {
                                seg_sum[d as usize] = seg_sum[d as usize] + exps[k];
                            }
                            exps.iter()
                                .zip(dst_ids)
                                .map(|(&x, &d)| x / seg_sum[d as usize])
                                .collect()
                        },
                    )?;
                    rc.z = Some(e);
                    rc.q = Some(q);
                    rc.alpha = Some(alpha.clone());
                    Some(alpha)
                }
            };
            let weighted: Option<Array2<F>> = match &edge_weights {
                None => None,
                Some(wts) => {
                    let pm = &rc.p;
                    Some(device.submit(
                        desc("attn_scale", Stage::NeighborAggregation, li).relation(rel as u32),
                        || {
                            let mut m = pm.clone();
                            for (k, &wt) in wts.iter().enumerate() {
                                let mut row = m.row_mut(k);
                                row *= wt;
                            }
                            m
                        },
                    )?)
                }
            };
            match path {
                ExecPath::PerRelation => {
                    // One scatter + one gather kernel per semantic graph.
                    let rows = weighted.as_ref().unwrap_or(&rc.p);
                    let segs = block.dst_counts[dty];
                    let (mut sums, degs) = device.submit(
                        desc("scatter", Stage::NeighborAggregation, li)
                            .relation(rel as u32)
                            .bytes((rows.len() * F::BYTES) as u64, 0),
                        || segment_sum(rows, &edges.dst_index, segs),
                    )??;
                    let mean = params.kind == ModelKind::Rgcn;
                    device.submit(
                        desc("gather", Stage::NeighborAggregation, li)
                            .relation(rel as u32)
                            .bytes((sums.len() * F::BYTES) as u64, 0),
                        || {
                            if mean {
                                for (i, &d) in degs.iter().enumerate() {
                                    if d > 0 {
                                        let inv = F::one() / F::from_f64(d as f64);
                                        let mut row = sums.row_mut(i);
                                        row *= inv;
                                    }
                                }
                            }
                        },
                    )?;
                    let f = &mut fused[dty];
                    device.submit(
                        desc("fuse_add", Stage::SemanticFusion, li)
                            .relation(rel as u32)
                            .bytes((sums.len() * F::BYTES) as u64, 0),
                        || *f += &sums,
                    )?;
                }
                ExecPath::Merged => {
                    let rows = weighted.unwrap_or_else(|| rc.p.clone());
                    let base = seg_base[dty] as u32;
                    let segs: Vec<u32> = edges.dst_index.iter().map(|&d| base + d).collect();
                    merged_parts.push((rel as u32, rows, segs));
                }
            }
            rel_caches[rel] = Some(rc);
        }
        if path == ExecPath::Merged && !merged_parts.is_empty() {
            let mi = merge_relation_parts(
                merged_parts,
                num_rel,
                total_segments,
                device,
                batch_id,
                Some(li as u32),
            )?;
            let agg = crate::aggregate::aggregate_merged(&mi, crate::aggregate::Reducer::Sum, device)?;
            // Split the fused segment matrix back per destination type;
            // relations sharing a type fused inside the single kernel.
            for t in 0..num_types {
                let k = block.dst_counts[t];
                if k == 0 {
                    continue;
                }
                let lo = seg_base[t];
                fused[t].assign(&agg.values.slice(s![lo..lo + k, ..]));
            }
        }
        // Fuse the self transform.
        for t in 0..num_types {
            if block.dst_counts[t] == 0 {
                continue;
            }
            let s = &self_out[t];
            let f = &mut fused[t];
            device.submit(
                desc("fuse_self", Stage::SemanticFusion, li)
                    .bytes((s.len() * F::BYTES) as u64, 0),
                || *f += s,
            )?;
        }
        let relu = li + 1 < batch.layers.len();
        let preact = fused;
        let mut acts = Vec::with_capacity(num_types);
        for t in 0..num_types {
            if relu {
                let pa = &preact[t];
                let a = device.submit(
                    desc("relu", Stage::Other, li).bytes((pa.len() * F::BYTES) as u64, 0),
                    || pa.mapv(|v| if v > F::zero() { v } else { F::zero() }),
                )?;
                acts.push(a);
            } else {
                acts.push(preact[t].clone());
            }
        }
        cache_layers.push(LayerCache {
            self_in,
            self_out,
            rel: rel_caches,
            preact,
            relu,
        });
        prev = Some(TypedFeatures { blocks: acts });
    }
    // Seed logits from the innermost layer's outputs.
    let final_acts = prev.expect("at least one layer");
    let num_classes = params.num_classes;
    let mut logits = Array2::zeros((batch.seeds.len(), num_classes));
    for (i, &(ty, pos)) in seed_positions(batch, num_types).iter().enumerate() {
        logits.row_mut(i).assign(&final_acts.blocks[ty].row(pos));
    }
    Ok(ForwardCache {
        layers: cache_layers,
        logits,
    })
}

/// Cross-entropy over seed logits: returns the mean loss and the logits
/// gradient (softmax minus one-hot, averaged).
pub fn loss_and_grad<F: Scalar>(
    logits: &Array2<F>,
    labels: &[u32],
    device: &DeviceQueue,
) -> Result<(f64, Array2<F>), ModelError> {
    if logits.nrows() != labels.len() {
        return Err(ModelError::DimMismatch(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let n = labels.len();
    let out = device.submit(
        KernelDesc::new("softmax_xent", Stage::Other)
            .bytes((logits.len() * F::BYTES) as u64, (logits.len() * F::BYTES) as u64),
        || {
            let mut grad = Array2::zeros(logits.dim());
            let mut loss = 0.0f64;
            let inv_n = F::one() / F::from_f64(n as f64);
            for (i, &label) in labels.iter().enumerate() {
                let row = logits.row(i);
                let max = row.iter().cloned().fold(F::from_f64(f64::NEG_INFINITY), F::max);
                let exps: Array1<F> = row.mapv(|v| (v - max).exp());
                let sum: F = exps.sum();
                let probs = exps.mapv(|e| e / sum);
                loss -= probs[label as usize].to_f64().ln();
                let mut grow = grad.row_mut(i);
                grow.assign(&probs.mapv(|p| p * inv_n));
                grow[label as usize] = grow[label as usize] - inv_n;
            }
            (loss / n as f64, grad)
        },
    )?;
    Ok(out)
}
