//! One denoising module: four graph-convolution / state-space stages, a
//! state-space decoder and a bounded per-point displacement head.
//!
//! Points enter the sequence models sorted by distance to the patch
//! reference point (ties by position), and results are returned in the
//! caller's order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{dist2, Point3};
use crate::mamba::{mamba_block, randn, MambaBlockParams, MambaConfig};
use crate::net::edgeconv::{edgeconv_layer, EdgeConvParams};
use crate::patch::{knn_graph_features, knn_graph_points, DirectedGraph, Patch};
use crate::rng::GaussianStream;

pub const STAGES: usize = 4;

/// Scale of the displacement head's output layer at initialization, so an
/// untrained module moves points by a small fraction of `max_step`.
const HEAD_OUT_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Feature width of every stage.
    pub width: usize,
    /// Neighbours per vertex in the graph convolutions.
    pub k: usize,
    /// State-space layers after each graph convolution.
    pub mamba_layers: usize,
    pub mamba: MambaConfig,
    /// Bound on each displacement component per module pass, in units of
    /// the normalized cloud's bounding-sphere radius.
    pub max_step: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 32,
            k: 16,
            mamba_layers: 6,
            mamba: MambaConfig::default(),
            max_step: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.mamba.validate()?;
        if self.width < 2 || self.k == 0 || self.mamba_layers == 0 {
            return Err(Error::invalid("width ≥ 2, k ≥ 1 and mamba_layers ≥ 1 are required"));
        }
        if !(self.max_step > 0.0) || !self.max_step.is_finite() {
            return Err(Error::invalid("max_step must be positive"));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        (self.width / 2).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseModuleParams {
    pub config: NetConfig,
    pub edgeconv: Vec<EdgeConvParams>,
    pub stages: Vec<Vec<MambaBlockParams>>,
    pub decoder: MambaBlockParams,
    pub head_hidden_w: ParamId,
    pub head_hidden_b: ParamId,
    pub head_out_w: ParamId,
    pub head_out_b: ParamId,
}

impl DenoiseModuleParams {
    pub fn init(store: &mut ParamStore, prefix: &str, config: NetConfig, rng: &mut GaussianStream) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut edgeconv = Vec::with_capacity(STAGES);
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let din = if s == 0 { 3 } else { d };
            edgeconv.push(EdgeConvParams::init(store, &format!("{prefix}.ec{s}"), din, d, config.k, rng));
            let layers = (0..config.mamba_layers)
                .map(|l| MambaBlockParams::init(store, &format!("{prefix}.ssm{s}.{l}"), d, config.mamba, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(layers);
        }
        let decoder = MambaBlockParams::init(store, &format!("{prefix}.dec"), d, config.mamba, rng)?;
        let h = config.hidden();
        Ok(Self {
            config,
            edgeconv,
            stages,
            decoder,
            head_hidden_w: store.add(format!("{prefix}.head.hidden.w"), randn(rng, d, h, 1.0 / (d as f64).sqrt())),
            head_hidden_b: store.add(format!("{prefix}.head.hidden.b"), Tensor::zeros(1, h)),
            head_out_w: store.add(format!("{prefix}.head.out.w"), randn(rng, h, 3, HEAD_OUT_GAIN / (h as f64).sqrt())),
            head_out_b: store.add(format!("{prefix}.head.out.b"), Tensor::zeros(1, 3)),
        })
    }

    pub fn find(store: &ParamStore, prefix: &str, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let h = config.hidden();
        let mut edgeconv = Vec::with_capacity(STAGES);
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let din = if s == 0 { 3 } else { d };
            edgeconv.push(EdgeConvParams::find(store, &format!("{prefix}.ec{s}"), din, d)?);
            let layers = (0..config.mamba_layers)
                .map(|l| MambaBlockParams::find(store, &format!("{prefix}.ssm{s}.{l}"), d, config.mamba))
                .collect::<Result<Vec<_>>>()?;
            stages.push(layers);
        }
        let get = |name: &str, shape: (usize, usize)| {
            let key = format!("{prefix}.{name}");
            let id = store
                .find(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!("tensor {key} has the wrong shape")));
            }
            Ok(id)
        };
        Ok(Self {
            config,
            edgeconv,
            stages,
            decoder: MambaBlockParams::find(store, &format!("{prefix}.dec"), d, config.mamba)?,
            head_hidden_w: get("head.hidden.w", (d, h))?,
            head_hidden_b: get("head.hidden.b", (1, h))?,
            head_out_w: get("head.out.w", (h, 3))?,
            head_out_b: get("head.out.b", (1, 3))?,
        })
    }

    /// Clears the final linear layer so every displacement is zero.
    pub fn zero_decoder(&self, store: &mut ParamStore) {
        for id in [self.head_out_w, self.head_out_b] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Sequence order: ascending distance to `reference`, ties by position.
pub fn sequence_order(points: &[Point3], reference: &Point3) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    let d: Vec<f64> = points.iter().map(|p| dist2(p, reference)).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inv[i] = pos;
    }
    inv
}

fn as_points(t: &Tensor) -> Vec<Point3> {
    t.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Encoder over points already in sequence order, centred on the reference
/// and scaled by the patch radius.
fn encode_sequence(g: &Graph, store: &ParamStore, p: &DenoiseModuleParams, x: Var) -> Result<Var> {
    let k = p.config.k;
    if x.rows < k + 1 {
        return Err(Error::invalid(format!(
            "patch of {} points is too small for k = {k}",
            x.rows
        )));
    }
    let mut h = x;
    for (s, (ec, layers)) in p.edgeconv.iter().zip(&p.stages).enumerate() {
        let hv = g.value(h);
        let neighbors = g.choose_indices(hv.rows * k, || {
            let graph = if s == 0 {
                knn_graph_points(&as_points(&hv), k)?
            } else {
                knn_graph_features(&hv.data, hv.cols, k)?
            };
            Ok(graph.neighbors)
        })?;
        let graph = DirectedGraph {
            vertex_count: hv.rows,
            k,
            neighbors,
        };
        h = edgeconv_layer(g, store, ec, &graph, h)?;
        for layer in layers {
            h = mamba_block(g, store, layer, h)?;
        }
    }
    Ok(h)
}

/// Sorted, centred and radius-scaled copy of `points`, plus the order used.
fn prepare(g: &Graph, points: Var, reference: &Point3, radius: f64) -> Result<(Var, Vec<usize>)> {
    let order = g.choose_indices(points.rows, || Ok(sequence_order(&as_points(&g.value(points)), reference)))?;
    let sorted = g.gather_rows(points, &order);
    let shift = g.constant(Tensor::new(1, 3, reference.iter().map(|v| -v).collect()));
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    Ok((g.scale(g.add_row(sorted, shift), scale), order))
}

/// Per-point features (`n × width`) in the order of `points`.
pub fn encode_var(
    g: &Graph,
    store: &ParamStore,
    p: &DenoiseModuleParams,
    points: Var,
    reference: &Point3,
    radius: f64,
) -> Result<Var> {
    let (x, order) = prepare(g, points, reference, radius)?;
    let h = encode_sequence(g, store, p, x)?;
    Ok(g.gather_rows(h, &inverse(&order)))
}

/// Displacements (`n × 3`) for a feature sequence, read in the given order.
pub fn decode_var(g: &Graph, store: &ParamStore, p: &DenoiseModuleParams, features: Var) -> Result<Var> {
    if features.rows == 0 {
        return Err(Error::invalid("empty feature sequence"));
    }
    if features.cols != p.config.width {
        return Err(Error::invalid("feature width does not match the decoder"));
    }
    let h = mamba_block(g, store, &p.decoder, features)?;
    let h = g.silu(g.linear(h, g.param(store, p.head_hidden_w), Some(g.param(store, p.head_hidden_b))));
    let z = g.linear(h, g.param(store, p.head_out_w), Some(g.param(store, p.head_out_b)));
    Ok(g.scale(g.tanh(z), p.config.max_step))
}

/// `points + decode(encode(points))`, differentiable in `points` and the
/// parameters. The neighbour graphs and sequence order are rebuilt from the
/// current values on every call.
pub fn module_step(
    g: &Graph,
    store: &ParamStore,
    p: &DenoiseModuleParams,
    points: Var,
    reference: &Point3,
    radius: f64,
) -> Result<Var> {
    let (x, order) = prepare(g, points, reference, radius)?;
    let h = encode_sequence(g, store, p, x)?;
    let disp = decode_var(g, store, p, h)?;
    Ok(g.add(points, g.gather_rows(disp, &inverse(&order))))
}

pub(crate) fn points_tensor(points: &[Point3]) -> Tensor {
    Tensor::new(points.len(), 3, points.iter().flatten().copied().collect())
}

/// Untracked encoder features of a patch, one row per patch point.
pub fn encode(patch: &Patch, store: &ParamStore, p: &DenoiseModuleParams) -> Result<Tensor> {
    let g = Graph::inference();
    let x = g.constant(points_tensor(&patch.points));
    let h = encode_var(&g, store, p, x, &patch.reference, patch.radius)?;
    Ok((*g.value(h)).clone())
}

/// Untracked decoder applied to a feature sequence.
pub fn decode(features: &Tensor, store: &ParamStore, p: &DenoiseModuleParams) -> Result<Tensor> {
    let g = Graph::inference();
    let f = g.constant(features.clone());
    let d = decode_var(&g, store, p, f)?;
    Ok((*g.value(d)).clone())
}

/// One module pass over a patch; reference, radius and indices are kept.
pub fn denoise_module(patch: &Patch, store: &ParamStore, p: &DenoiseModuleParams) -> Result<Patch> {
    let g = Graph::inference();
    let x = g.constant(points_tensor(&patch.points));
    let y = module_step(&g, store, p, x, &patch.reference, patch.radius)?;
    Ok(patch.with_points(as_points(&g.value(y))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::mamba::mamba_block_forward;
    use crate::ssm::ScanMode;

    fn small_config() -> NetConfig {
        NetConfig {
            width: 8,
            k: 4,
            mamba_layers: 1,
            mamba: MambaConfig {
                state_dim: 4,
                expansion: 2,
                conv_width: 3,
                scan_mode: ScanMode::Sequential,
            },
            max_step: 0.05,
        }
    }

    fn model(seed: u64, cfg: NetConfig) -> (ParamStore, DenoiseModuleParams) {
        let mut store = ParamStore::new();
        let p = DenoiseModuleParams::init(&mut store, "m0", cfg, &mut GaussianStream::new(seed)).unwrap();
        (store, p)
    }

    fn patch(n: usize, seed: u64) -> Patch {
        let mut g = GaussianStream::new(seed);
        let cloud = PointCloud::new((0..n).map(|_| [g.uniform(), g.uniform(), g.uniform()]).collect());
        let members: Vec<usize> = (0..n).collect();
        Patch::from_members(&cloud, [0.5, 0.5, 0.5], members)
    }

    #[test]
    fn shape_contract() {
        let (store, p) = model(1, small_config());
        let f = encode(&patch(32, 2), &store, &p).unwrap();
        assert_eq!(f.shape(), (32, 8));
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (store, p) = model(3, small_config());
        let base = patch(40, 4);
        let f = encode(&base, &store, &p).unwrap();
        let mut perm: Vec<usize> = (0..40).collect();
        let mut g = GaussianStream::new(5);
        for i in (1..40).rev() {
            perm.swap(i, g.index(i + 1));
        }
        let shuffled = Patch {
            points: perm.iter().map(|&i| base.points[i]).collect(),
            original_indices: perm.iter().map(|&i| base.original_indices[i]).collect(),
            ..base.clone()
        };
        let fs = encode(&shuffled, &store, &p).unwrap();
        for (pos, &i) in perm.iter().enumerate() {
            assert_eq!(fs.row(pos), f.row(i));
        }
    }

    #[test]
    fn identity_blocks_reduce_to_graph_convolutions() {
        let (mut store, p) = model(6, small_config());
        for layer in p.stages.iter().flatten() {
            store.get_mut(layer.out_proj).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let pt = patch(30, 7);
        let got = encode(&pt, &store, &p).unwrap();

        let g = Graph::inference();
        let order = sequence_order(&pt.points, &pt.reference);
        let centred: Vec<Point3> = order
            .iter()
            .map(|&i| {
                let q = pt.points[i];
                let r = pt.reference;
                let s = 1.0 / pt.radius;
                [(q[0] + -r[0]) * s, (q[1] + -r[1]) * s, (q[2] + -r[2]) * s]
            })
            .collect();
        let mut h = g.constant(points_tensor(&centred));
        for (s, ec) in p.edgeconv.iter().enumerate() {
            let hv = g.value(h);
            let graph = if s == 0 {
                knn_graph_points(&centred, 4).unwrap()
            } else {
                knn_graph_features(&hv.data, 8, 4).unwrap()
            };
            h = edgeconv_layer(&g, &store, ec, &graph, h).unwrap();
        }
        let want = g.value(h);
        for (pos, &i) in order.iter().enumerate() {
            assert_eq!(got.row(i), want.row(pos));
        }
    }

    #[test]
    fn zero_head_gives_zero_displacement_and_identity() {
        let (mut store, p) = model(8, small_config());
        p.zero_decoder(&mut store);
        let pt = patch(25, 9);
        let f = encode(&pt, &store, &p).unwrap();
        assert!(decode(&f, &store, &p).unwrap().data.iter().all(|&v| v == 0.0));
        let out = denoise_module(&pt, &store, &p).unwrap();
        assert_eq!(out, pt);
    }

    #[test]
    fn displacement_is_bounded() {
        let (mut store, p) = model(10, small_config());
        store.get_mut(p.head_out_w).data.iter_mut().for_each(|v| *v *= 1e3);
        let pt = patch(25, 11);
        let out = denoise_module(&pt, &store, &p).unwrap();
        assert_eq!(out.original_indices, pt.original_indices);
        assert_eq!(out.reference, pt.reference);
        for (a, b) in out.points.iter().zip(&pt.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn decode_matches_layer_by_layer() {
        let (store, p) = model(12, small_config());
        let feats = randn(&mut GaussianStream::new(13), 10, 8, 1.0);
        let got = decode(&feats, &store, &p).unwrap();
        let h = mamba_block_forward(&store, &p.decoder, &feats).unwrap();
        let hw = store.get(p.head_hidden_w);
        let hb = store.get(p.head_hidden_b);
        let ow = store.get(p.head_out_w);
        let ob = store.get(p.head_out_b);
        for r in 0..10 {
            let hidden: Vec<f64> = (0..4)
                .map(|j| {
                    let z: f64 = (0..8).map(|i| h.at(r, i) * hw.at(i, j)).sum::<f64>() + hb.data[j];
                    z / (1.0 + (-z).exp())
                })
                .collect();
            for c in 0..3 {
                let z: f64 = (0..4).map(|j| hidden[j] * ow.at(j, c)).sum::<f64>() + ob.data[c];
                assert!((got.at(r, c) - 0.05 * z.tanh()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stacked_modules_keep_shape_on_large_patch() {
        let cfg = NetConfig {
            width: 8,
            k: 8,
            ..small_config()
        };
        let mut store = ParamStore::new();
        let mut rng = GaussianStream::new(14);
        let modules: Vec<_> = (0..4)
            .map(|m| DenoiseModuleParams::init(&mut store, &format!("m{m}"), cfg, &mut rng).unwrap())
            .collect();
        let mut pt = patch(2000, 15);
        let original = pt.original_indices.clone();
        for m in &modules {
            pt = denoise_module(&pt, &store, m).unwrap();
        }
        assert_eq!(pt.len(), 2000);
        assert_eq!(pt.original_indices, original);
        assert!(pt.points.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn too_small_patch_is_rejected() {
        let (store, p) = model(16, small_config());
        assert!(encode(&patch(4, 17), &store, &p).is_err());
    }

    #[test]
    fn find_round_trips() {
        let (store, p) = model(18, small_config());
        assert_eq!(DenoiseModuleParams::find(&store, "m0", p.config).unwrap(), p);
    }
}
