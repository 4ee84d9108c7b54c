//! Analytic backward pass. Mirrors the forward kernel structure: the
//! per-relation path replays one aggregation-backward kernel per semantic
//! graph, the merged path replays a single one per layer.

use ndarray::{Array1, Array2};

use crate::device::{DeviceQueue, KernelDesc, Stage};
use crate::features::FeatureStore;
use crate::model::{seed_positions, ExecPath, ModelError, ModelKind, ModelParams};
use crate::sampler::MiniBatch;
use crate::semantic::SemanticGraphSet;
use crate::Scalar;

use super::ForwardCache;

pub fn backward<F: Scalar>(
    batch: &MiniBatch,
    sgs: &SemanticGraphSet,
    _store: &FeatureStore<F>,
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    grad_logits: Array2<F>,
    path: ExecPath,
    device: &DeviceQueue,
    batch_id: Option<u32>,
) -> Result<ModelParams<F>, ModelError> {
    let num_types = params.in_dims.len();
    let num_rel = sgs.rel_types.len();
    let mut grads = params.zeros_like();
    let desc = |name: &'static str, stage: Stage, layer: usize| {
        let mut d = KernelDesc::new(name, stage).layer(layer as u32);
        d.batch = batch_id;
        d
    };
    let last = batch.layers.len() - 1;
    // Seed the output gradient into the innermost destination prefix.
    let mut g: Vec<Array2<F>> = (0..num_types)
        .map(|t| Array2::zeros((batch.layers[last].dst_counts[t], params.num_classes)))
        .collect();
    for (i, &(ty, pos)) in seed_positions(batch, num_types).iter().enumerate() {
        let mut row = g[ty].row_mut(pos);
        row += &grad_logits.row(i);
    }
    for li in (0..=last).rev() {
        let block = &batch.layers[li];
        let lc = &cache.layers[li];
        let lp = &params.layers[li];
        let gl = &mut grads.layers[li];
        if lc.relu {
            for t in 0..num_types {
                let pa = &lc.preact[t];
                g[t].zip_mut_with(pa, |gv, &p| {
                    if p <= F::zero() {
                        *gv = F::zero();
                    }
                });
            }
        }
        // Self-fusion gradient; RGAT attention adds to it through the
        // projected destination rows.
        let mut d_self: Vec<Array2<F>> = g.clone();
        let need_input = li > 0;
        let in_dim = |t: usize| if li == 0 { params.in_dims[t] } else { params.hidden };
        let mut d_in: Vec<Array2<F>> = if need_input {
            (0..num_types)
                .map(|t| Array2::zeros((block.vertex_map[t].len(), in_dim(t))))
                .collect()
        } else {
            Vec::new()
        };
        // Upstream per-edge gradients: one kernel per relation on the
        // per-relation path, a single kernel per layer on the merged path.
        let gather_up = |rel: usize| -> Array2<F> {
            let (_, dty) = sgs.rel_types[rel];
            let edges = &sgs.layers[li][rel];
            let mut u = Array2::zeros((edges.dst_index.len(), g[dty].ncols()));
            for (k, &d) in edges.dst_index.iter().enumerate() {
                u.row_mut(k).assign(&g[dty].row(d as usize));
            }
            u
        };
        let mut upstream: Vec<Option<Array2<F>>> = vec![None; num_rel];
        match path {
            ExecPath::Merged => {
                let nonempty: Vec<usize> = (0..num_rel)
                    .filter(|&r| !sgs.layers[li][r].src_index.is_empty())
                    .collect();
                if !nonempty.is_empty() {
                    let ups = device.submit(
                        desc("aggregate_grad", Stage::NeighborAggregation, li),
                        || nonempty.iter().map(|&r| gather_up(r)).collect::<Vec<_>>(),
                    )?;
                    for (r, u) in nonempty.into_iter().zip(ups) {
                        upstream[r] = Some(u);
                    }
                }
            }
            ExecPath::PerRelation => {
                for rel in 0..num_rel {
                    if sgs.layers[li][rel].src_index.is_empty() {
                        continue;
                    }
                    let u = device.submit(
                        desc("scatter_grad", Stage::NeighborAggregation, li).relation(rel as u32),
                        || gather_up(rel),
                    )?;
                    upstream[rel] = Some(u);
                }
            }
        }
        for rel in 0..num_rel {
            let Some(rc) = lc.rel[rel].as_ref() else { continue };
            let u = upstream[rel].take().expect("upstream gradient");
            let (sty, dty) = sgs.rel_types[rel];
            let edges = &sgs.layers[li][rel];
            let d_p: Array2<F> = match params.kind {
                ModelKind::Rgcn => {
                    // Mean backward: scale each edge row by 1/deg(dst).
                    let mut d_p = u;
                    for (k, &d) in edges.dst_index.iter().enumerate() {
                        let inv = F::one() / F::from_f64(rc.degrees[d as usize] as f64);
                        let mut row = d_p.row_mut(k);
                        row *= inv;
                    }
                    d_p
                }
                ModelKind::Rgat => {
                    let attn = &lp.attn.as_ref().expect("rgat attention params")[rel];
                    let alpha = rc.alpha.as_ref().expect("cached alpha");
                    let z = rc.z.as_ref().expect("cached logits");
                    let q = rc.q.as_ref().expect("cached dst projections");
                    let slope = params.leaky_slope;
                    let segs = block.dst_counts[dty];
                    let ga = &mut gl.attn.as_mut().expect("attn grads")[rel];
                    let (d_p, da_src, da_dst, dq) = device.submit(
                        desc("attn_grad", Stage::NeighborAggregation, li).relation(rel as u32),
                        || {
                            let ne = edges.dst_index.len();
                            // Weighted-sum backward.
                            let d_alpha: Vec<F> =
                                (0..ne).map(|k| u.row(k).dot(&rc.p.row(k))).collect();
                            let mut d_p = u.clone();
                            for (k, &a) in alpha.iter().enumerate() {
                                let mut row = d_p.row_mut(k);
                                row *= a;
                            }
                            // Softmax backward per destination segment.
                            let mut seg_dot = vec![F::zero(); segs];
                            for (k, &d) in edges.dst_index.iter().enumerate() {
                                seg_dot[d as usize] = seg_dot[d as usize] + alpha[k] * d_alpha[k];
                            }
                            let mut da_src = Array1::zeros(attn.a_src.len());
                            let mut da_dst = Array1::zeros(attn.a_dst.len());
                            let mut dq = Array2::zeros(q.dim());
                            for (k, &d) in edges.dst_index.iter().enumerate() {
                                let de = alpha[k] * (d_alpha[k] - seg_dot[d as usize]);
                                let lp_prime =
                                    if z[k] > F::zero() { F::one() } else { slope };
                                let dz = de * lp_prime;
                                da_src.scaled_add(dz, &rc.p.row(k));
                                da_dst.scaled_add(dz, &q.row(k));
                                d_p.row_mut(k).scaled_add(dz, &attn.a_src);
                                dq.row_mut(k).scaled_add(dz, &attn.a_dst);
                            }
                            (d_p, da_src, da_dst, dq)
                        },
                    )?;
                    ga.a_src += &da_src;
                    ga.a_dst += &da_dst;
                    // The destination projections came from w_self.
                    for (k, &d) in edges.dst_index.iter().enumerate() {
                        let mut row = d_self[dty].row_mut(d as usize);
                        row += &dq.row(k);
                    }
                    d_p
                }
            };
            // Projection backward.
            let w = &lp.w_rel[rel];
            let x = &rc.x;
            let (dw, db, dx) = device.submit(
                desc("matmul_project_grad", Stage::FeatureProjection, li).relation(rel as u32),
                || {
                    let dw = x.t().dot(&d_p);
                    let db = d_p.sum_axis(ndarray::Axis(0));
                    let dx = need_input.then(|| d_p.dot(&w.t()));
                    (dw, db, dx)
                },
            )?;
            gl.w_rel[rel] += &dw;
            gl.b_rel[rel] += &db;
            if let Some(dx) = dx {
                for (k, &s) in edges.src_index.iter().enumerate() {
                    let mut row = d_in[sty].row_mut(s as usize);
                    row += &dx.row(k);
                }
            }
        }
        // Self transform backward.
        for t in 0..num_types {
            let k = block.dst_counts[t];
            if k == 0 {
                continue;
            }
            let xi = &lc.self_in[t];
            let ds = &d_self[t];
            let w = &lp.w_self[t];
            let (dw, dx) = device.submit(
                desc("matmul_self_grad", Stage::FeatureProjection, li),
                || {
                    let dw = xi.t().dot(ds);
                    let dx = need_input.then(|| ds.dot(&w.t()));
                    (dw, dx)
                },
            )?;
            gl.w_self[t] += &dw;
            if let Some(dx) = dx {
                let mut head = d_in[t].slice_mut(ndarray::s![..k, ..]);
                head += &dx;
            }
        }
        if need_input {
            g = d_in;
        }
    }
    Ok(grads)
}
