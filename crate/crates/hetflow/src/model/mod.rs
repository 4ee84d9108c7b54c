//! RGCN and RGAT layers: feature projection, neighbor aggregation, and
//! semantic fusion, with forward, analytic backward, cross-entropy loss,
//! and SGD step. Both models run on either execution path (per-relation
//! kernels or merged single-kernel aggregation) with equal results up to
//! floating-point reassociation.

mod backward;
mod forward;

pub use backward::backward;
pub use forward::{forward, loss_and_grad, ForwardCache, LayerCache, RelCache};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::device::DeviceError;
use crate::features::{FeatureError, FeatureStore};
use crate::graph::HeteroGraph;
use crate::sampler::MiniBatch;
use crate::semantic::SemanticGraphSet;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Rgcn,
    Rgat,
}

/// Which aggregation path executes the forward/backward kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    PerRelation,
    Merged,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite {what} in step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Attention<F> {
    pub a_src: Array1<F>,
    pub a_dst: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<F> {
    /// Per relation: in_dim(src_type) x out_dim.
    pub w_rel: Vec<Array2<F>>,
    pub b_rel: Vec<Array1<F>>,
    /// Per vertex type: in_dim(type) x out_dim.
    pub w_self: Vec<Array2<F>>,
    /// RGAT only, per relation.
    pub attn: Option<Vec<Attention<F>>>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub kind: ModelKind,
    pub layers: Vec<LayerParams<F>>,
    pub leaky_slope: F,
    /// Per-type input feature widths at layer 0.
    pub in_dims: Vec<usize>,
    pub hidden: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

fn glorot<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| F::sample_uniform(rng, -bound, bound))
}

impl<F: Scalar> ModelParams<F> {
    pub fn init(
        g: &HeteroGraph,
        kind: ModelKind,
        hidden: usize,
        num_layers: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let in_dims: Vec<usize> = g.vertex_types.iter().map(|t| t.feature_dim).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let out = if layer + 1 == num_layers {
                num_classes
            } else {
                hidden
            };
            let dim_of = |ty: usize| if layer == 0 { in_dims[ty] } else { hidden };
            let w_rel = g
                .relations
                .iter()
                .map(|r| glorot(&mut rng, dim_of(r.src_type), out))
                .collect();
            let b_rel = g.relations.iter().map(|_| Array1::zeros(out)).collect();
            let w_self = (0..g.num_types())
                .map(|t| glorot(&mut rng, dim_of(t), out))
                .collect();
            let attn = (kind == ModelKind::Rgat).then(|| {
                g.relations
                    .iter()
                    .map(|_| Attention {
                        a_src: glorot(&mut rng, out, 1).column(0).to_owned(),
                        a_dst: glorot(&mut rng, out, 1).column(0).to_owned(),
                    })
                    .collect()
            });
            layers.push(LayerParams {
                w_rel,
                b_rel,
                w_self,
                attn,
            });
        }
        Self {
            kind,
            layers,
            leaky_slope: F::from_f64(0.2),
            in_dims,
            hidden,
            num_classes,
            init_seed: seed,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                w_rel: l.w_rel.iter().map(|w| Array2::zeros(w.dim())).collect(),
                b_rel: l.b_rel.iter().map(|b| Array1::zeros(b.len())).collect(),
                w_self: l.w_self.iter().map(|w| Array2::zeros(w.dim())).collect(),
                attn: l.attn.as_ref().map(|a| {
                    a.iter()
                        .map(|at| Attention {
                            a_src: Array1::zeros(at.a_src.len()),
                            a_dst: Array1::zeros(at.a_dst.len()),
                        })
                        .collect()
                }),
            })
            .collect();
        Self {
            layers,
            ..self.clone()
        }
    }

    /// All parameter scalars in a fixed order (layer, relation weights,
    /// relation biases, self weights, attention vectors).
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit(|v| out.extend(v.iter().copied()));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        let mut pos = 0;
        self.visit_mut(|v| {
            for x in v {
                *x = flat[pos];
                pos += 1;
            }
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    fn visit(&self, mut f: impl FnMut(&[F])) {
        for l in &self.layers {
            for w in &l.w_rel {
                f(w.as_slice().unwrap());
            }
            for b in &l.b_rel {
                f(b.as_slice().unwrap());
            }
            for w in &l.w_self {
                f(w.as_slice().unwrap());
            }
            if let Some(attn) = &l.attn {
                for a in attn {
                    f(a.a_src.as_slice().unwrap());
                    f(a.a_dst.as_slice().unwrap());
                }
            }
        }
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [F])) {
        for l in &mut self.layers {
            for w in &mut l.w_rel {
                f(w.as_slice_mut().unwrap());
            }
            for b in &mut l.b_rel {
                f(b.as_slice_mut().unwrap());
            }
            for w in &mut l.w_self {
                f(w.as_slice_mut().unwrap());
            }
            if let Some(attn) = &mut l.attn {
                for a in attn {
                    f(a.a_src.as_slice_mut().unwrap());
                    f(a.a_dst.as_slice_mut().unwrap());
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|v| ok &= v.iter().all(|x| (*x).to_f64().is_finite()));
        ok
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub params: ModelParams<F>,
    pub grads: ModelParams<F>,
    pub step: u64,
    pub lr: F,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(params: ModelParams<F>, lr: f64) -> Self {
        let grads = params.zeros_like();
        Self {
            params,
            grads,
            step: 0,
            lr: F::from_f64(lr),
        }
    }

    /// Forward (with cached activations), cross-entropy loss over seed
    /// logits, analytic backward, SGD update. Aborts on non-finite loss
    /// or gradients.
    pub fn backward_and_step(
        &mut self,
        batch: &MiniBatch,
        sgs: &SemanticGraphSet,
        store: &FeatureStore<F>,
        path: ExecPath,
        device: &crate::device::DeviceQueue,
        batch_id: Option<u32>,
    ) -> Result<f64, ModelError> {
        let cache = forward(batch, sgs, store, &self.params, path, device, batch_id)?;
        let (loss, grad_logits) = loss_and_grad(&cache.logits, &batch.labels, device)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite {
                what: "loss",
                step: self.step,
            });
        }
        self.grads = backward(
            batch,
            sgs,
            store,
            &self.params,
            &cache,
            grad_logits,
            path,
            device,
            batch_id,
        )?;
        if !self.grads.all_finite() {
            return Err(ModelError::NonFinite {
                what: "gradient",
                step: self.step,
            });
        }
        let lr = self.lr;
        let gflat = self.grads.flatten();
        let mut pos = 0;
        self.params.visit_mut(|v| {
            for x in v {
                *x = *x - lr * gflat[pos];
                pos += 1;
            }
        });
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: ModelKind,
    in_dims: Vec<usize>,
    hidden: usize,
    num_layers: usize,
    num_classes: usize,
    init_seed: u64,
    step: u64,
    scalar_bytes: usize,
    num_params: usize,
}

/// Flat little-endian parameter dump plus a JSON manifest alongside.
pub fn save_checkpoint<F: Scalar>(
    params: &ModelParams<F>,
    step: u64,
    path: &std::path::Path,
) -> Result<(), ModelError> {
    let flat = params.flatten();
    let manifest = CheckpointManifest {
        kind: params.kind,
        in_dims: params.in_dims.clone(),
        hidden: params.hidden,
        num_layers: params.layers.len(),
        num_classes: params.num_classes,
        init_seed: params.init_seed,
        step,
        scalar_bytes: F::BYTES,
        num_params: flat.len(),
    };
    let mut bytes = Vec::with_capacity(flat.len() * F::BYTES);
    for v in flat {
        v.write_le(&mut bytes);
    }
    std::fs::write(path, bytes)?;
    let manifest_path = path.with_extension("json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

/// Loads a checkpoint into a freshly initialized parameter set; the
/// manifest must agree with the target's shape.
pub fn load_checkpoint<F: Scalar>(
    params: &mut ModelParams<F>,
    path: &std::path::Path,
) -> Result<u64, ModelError> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if manifest.scalar_bytes != F::BYTES
        || manifest.in_dims != params.in_dims
        || manifest.hidden != params.hidden
        || manifest.num_layers != params.layers.len()
        || manifest.num_classes != params.num_classes
    {
        return Err(ModelError::Checkpoint("manifest does not match model shape".into()));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() != manifest.num_params * F::BYTES {
        return Err(ModelError::Checkpoint("parameter blob size mismatch".into()));
    }
    let flat: Vec<F> = bytes
        .chunks_exact(F::BYTES)
        .map(F::from_le_slice)
        .collect();
    params.assign_from_flat(&flat);
    Ok(manifest.step)
}

/// Position of each seed inside its type's destination prefix of the
/// innermost layer block.
pub(crate) fn seed_positions(batch: &MiniBatch, num_types: usize) -> Vec<(usize, usize)> {
    let mut counters = vec![0usize; num_types];
    batch
        .seeds
        .iter()
        .map(|&(ty, _)| {
            let pos = counters[ty];
            counters[ty] += 1;
            (ty, pos)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceQueue;
    use crate::graph::{generate_synthetic, SyntheticSpec};
    use crate::sampler::{sample_batch, NodeLabels};
    use crate::semantic::select_edge_indices_serial;
    use std::time::Duration;

    fn setup(seed: u64) -> (HeteroGraph, FeatureStore<f64>, MiniBatch, SemanticGraphSet) {
        let g = generate_synthetic(&SyntheticSpec {
            counts: vec![9, 6, 5],
            relations: 5,
            edges: 80,
            feature_dim: 6,
            skew: 0.4,
            seed,
        })
        .unwrap();
        let store = {
            let im = FeatureStore::<f64>::random_index_major(&g, seed ^ 7);
            im.reorganize()
        };
        let labels = NodeLabels::synthetic(&g, 3, seed ^ 11);
        let seeds: Vec<(usize, u32)> = vec![(0, 0), (0, 3), (1, 1), (2, 2)];
        let batch = sample_batch(&g, &seeds, &[4, 3], &labels, seed ^ 13).unwrap();
        let sgs = select_edge_indices_serial(&batch, &g).unwrap();
        (g, store, batch, sgs)
    }

    fn quiet() -> DeviceQueue {
        DeviceQueue::new(Duration::ZERO)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn path_equivalence(kind: ModelKind, tol: f64) {
        for seed in [1u64, 2, 3] {
            let (g, store, batch, sgs) = setup(seed);
            let params = ModelParams::<f64>::init(&g, kind, 8, 2, 3, seed ^ 21);
            let dev = quiet();
            let a = forward(&batch, &sgs, &store, &params, ExecPath::PerRelation, &dev, None)
                .unwrap();
            let b = forward(&batch, &sgs, &store, &params, ExecPath::Merged, &dev, None).unwrap();
            let da = max_abs_diff(a.logits.as_slice().unwrap(), b.logits.as_slice().unwrap());
            assert!(da < tol, "logits diverge: {da}");
            let (_, gla) = loss_and_grad(&a.logits, &batch.labels, &dev).unwrap();
            let (_, glb) = loss_and_grad(&b.logits, &batch.labels, &dev).unwrap();
            let ga = backward(&batch, &sgs, &store, &params, &a, gla, ExecPath::PerRelation, &dev, None)
                .unwrap();
            let gb = backward(&batch, &sgs, &store, &params, &b, glb, ExecPath::Merged, &dev, None)
                .unwrap();
            let dg = max_abs_diff(&ga.flatten(), &gb.flatten());
            assert!(dg < tol, "gradients diverge: {dg}");
        }
    }

    #[test]
    fn paths_agree_rgcn() {
        path_equivalence(ModelKind::Rgcn, 1e-10);
    }

    #[test]
    fn paths_agree_rgat() {
        path_equivalence(ModelKind::Rgat, 1e-10);
    }

    fn fd_check(kind: ModelKind, path: ExecPath) {
        let (g, store, batch, sgs) = setup(5);
        let params = ModelParams::<f64>::init(&g, kind, 6, 2, 3, 99);
        let dev = quiet();
        let cache = forward(&batch, &sgs, &store, &params, path, &dev, None).unwrap();
        let (_, gl) = loss_and_grad(&cache.logits, &batch.labels, &dev).unwrap();
        let grads = backward(&batch, &sgs, &store, &params, &cache, gl, path, &dev, None)
            .unwrap()
            .flatten();
        let flat = params.flatten();
        let eps = 1e-6;
        // Probe a deterministic spread of parameter coordinates.
        let n = flat.len();
        for probe in 0..40 {
            let i = (probe * n / 40 + probe) % n;
            let mut up = params.clone();
            let mut down = params.clone();
            let mut fu = flat.clone();
            fu[i] += eps;
            up.assign_from_flat(&fu);
            fu[i] = flat[i] - eps;
            down.assign_from_flat(&fu);
            let lu = {
                let c = forward(&batch, &sgs, &store, &up, path, &dev, None).unwrap();
                loss_and_grad(&c.logits, &batch.labels, &dev).unwrap().0
            };
            let ld = {
                let c = forward(&batch, &sgs, &store, &down, path, &dev, None).unwrap();
                loss_and_grad(&c.logits, &batch.labels, &dev).unwrap().0
            };
            let fd = (lu - ld) / (2.0 * eps);
            let an = grads[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            let rel = (fd - an).abs() / denom;
            assert!(rel < 1e-4, "param {i}: analytic {an} vs fd {fd} (rel {rel})");
        }
    }

    #[test]
    fn finite_difference_rgcn() {
        fd_check(ModelKind::Rgcn, ExecPath::PerRelation);
    }

    #[test]
    fn finite_difference_rgat() {
        fd_check(ModelKind::Rgat, ExecPath::Merged);
    }

    #[test]
    fn attention_weights_normalize() {
        let (g, store, batch, sgs) = setup(8);
        let params = ModelParams::<f64>::init(&g, ModelKind::Rgat, 8, 2, 3, 4);
        let dev = quiet();
        let cache = forward(&batch, &sgs, &store, &params, ExecPath::PerRelation, &dev, None)
            .unwrap();
        let mut checked = 0;
        for (li, lc) in cache.layers.iter().enumerate() {
            for (rel, rc) in lc.rel.iter().enumerate() {
                let Some(rc) = rc else { continue };
                let alpha = rc.alpha.as_ref().unwrap();
                let edges = &sgs.layers[li][rel];
                let (_, dty) = sgs.rel_types[rel];
                let mut seg = vec![0.0f64; batch.layers[li].dst_counts[dty]];
                for (k, &d) in edges.dst_index.iter().enumerate() {
                    seg[d as usize] += alpha[k];
                }
                for (d, &s) in seg.iter().enumerate() {
                    if rc.degrees[d] > 0 {
                        assert!((s - 1.0).abs() < 1e-12, "segment {d} sums to {s}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn training_reduces_loss() {
        let (g, store, batch, sgs) = setup(12);
        let params = ModelParams::<f64>::init(&g, ModelKind::Rgcn, 8, 2, 3, 7);
        let dev = quiet();
        let mut state = TrainState::new(params, 0.1);
        let first = state
            .backward_and_step(&batch, &sgs, &store, ExecPath::Merged, &dev, None)
            .unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = state
                .backward_and_step(&batch, &sgs, &store, ExecPath::Merged, &dev, None)
                .unwrap();
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert_eq!(state.step, 31);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let (g, _, _, _) = setup(3);
        let params = ModelParams::<f64>::init(&g, ModelKind::Rgat, 8, 2, 3, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, 42, &path).unwrap();
        let mut loaded = ModelParams::<f64>::init(&g, ModelKind::Rgat, 8, 2, 3, 0);
        let step = load_checkpoint(&mut loaded, &path).unwrap();
        assert_eq!(step, 42);
        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let (g, _, _, _) = setup(3);
        let params = ModelParams::<f64>::init(&g, ModelKind::Rgcn, 8, 2, 3, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, 1, &path).unwrap();
        let mut other = ModelParams::<f64>::init(&g, ModelKind::Rgcn, 9, 2, 3, 17);
        assert!(load_checkpoint(&mut other, &path).is_err());
    }

    #[test]
    fn fp32_paths_agree_loosely() {
        let (g, store, batch, sgs) = setup(2);
        let store32 = {
            let blocks = store
                .as_typed()
                .iter()
                .map(|b| b.mapv(|v| v as f32))
                .collect();
            FeatureStore::<f32>::from_blocks(blocks)
        };
        for kind in [ModelKind::Rgcn, ModelKind::Rgat] {
            let params = ModelParams::<f32>::init(&g, kind, 8, 2, 3, 5);
            let dev = quiet();
            let a = forward(&batch, &sgs, &store32, &params, ExecPath::PerRelation, &dev, None)
                .unwrap();
            let b = forward(&batch, &sgs, &store32, &params, ExecPath::Merged, &dev, None)
                .unwrap();
            let d = a
                .logits
                .iter()
                .zip(b.logits.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(d < 1e-4, "fp32 paths diverge: {d}");
        }
    }
}
