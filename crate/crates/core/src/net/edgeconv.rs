//! Graph convolution over KNN edges.
//!
//! `h'_i = f(h_i) + Σ_{j ∈ N(i)} g(concat(h_i, h_j − h_i))` with
//! `f(x) = SiLU(x W_f + b_f)` and `g(x) = SiLU(x W_g + b_g)`.
//!
//! `W_g` is stored as its two row blocks `W_self` (acting on `h_i`) and
//! `W_diff` (acting on `h_j − h_i`), so the edge pre-activation splits into
//! a per-source term `h_i (W_self − W_diff) + b_g` and a per-target term
//! `h_j W_diff`, each computed once per vertex.

use serde::{Deserialize, Serialize};

use crate::autodiff::{silu, silu_grad, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::mamba::randn;
use crate::patch::DirectedGraph;
use crate::rng::GaussianStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeConvParams {
    pub in_width: usize,
    pub out_width: usize,
    pub f_w: ParamId,
    pub f_b: ParamId,
    pub g_self: ParamId,
    pub g_diff: ParamId,
    pub g_b: ParamId,
}

impl EdgeConvParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        k: usize,
        rng: &mut GaussianStream,
    ) -> Self {
        let std_f = 1.0 / (in_width as f64).sqrt();
        // the edge sum has k terms
        let std_g = 1.0 / ((2 * in_width) as f64).sqrt() / (k.max(1) as f64).sqrt();
        Self {
            in_width,
            out_width,
            f_w: store.add(format!("{prefix}.f.w"), randn(rng, in_width, out_width, std_f)),
            f_b: store.add(format!("{prefix}.f.b"), Tensor::zeros(1, out_width)),
            g_self: store.add(format!("{prefix}.g.self"), randn(rng, in_width, out_width, std_g)),
            g_diff: store.add(format!("{prefix}.g.diff"), randn(rng, in_width, out_width, std_g)),
            g_b: store.add(format!("{prefix}.g.b"), Tensor::zeros(1, out_width)),
        }
    }

    pub fn find(store: &ParamStore, prefix: &str, in_width: usize, out_width: usize) -> Result<Self> {
        let get = |name: &str, shape: (usize, usize)| {
            let key = format!("{prefix}.{name}");
            let id = store
                .find(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::invalid(format!("tensor {key} has the wrong shape")));
            }
            Ok(id)
        };
        Ok(Self {
            in_width,
            out_width,
            f_w: get("f.w", (in_width, out_width))?,
            f_b: get("f.b", (1, out_width))?,
            g_self: get("g.self", (in_width, out_width))?,
            g_diff: get("g.diff", (in_width, out_width))?,
            g_b: get("g.b", (1, out_width))?,
        })
    }
}

impl Graph {
    /// `out_i = Σ_{j ∈ N(i)} SiLU(src_i + dst_j)`.
    pub fn edge_aggregate(&self, src: Var, dst: Var, graph: &DirectedGraph) -> Var {
        let (n, c) = src.shape();
        assert_eq!(dst.shape(), (n, c));
        assert_eq!(graph.vertex_count, n);
        let sv = self.value(src);
        let dv = self.value(dst);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let si = sv.row(i);
            let oi = &mut out[i * c..(i + 1) * c];
            for &j in graph.neighbors_of(i) {
                let dj = dv.row(j);
                for ch in 0..c {
                    oi[ch] += silu(si[ch] + dj[ch]);
                }
            }
        }
        let graph = graph.clone();
        self.custom(Tensor::new(n, c, out), move |g, sink| {
            let mut gs = vec![0.0; n * c];
            let mut gd = vec![0.0; n * c];
            for i in 0..n {
                let si = sv.row(i);
                for &j in graph.neighbors_of(i) {
                    let dj = dv.row(j);
                    for ch in 0..c {
                        let d = g[i * c + ch] * silu_grad(si[ch] + dj[ch]);
                        gs[i * c + ch] += d;
                        gd[j * c + ch] += d;
                    }
                }
            }
            sink.add(src, &gs);
            sink.add(dst, &gd);
        })
    }
}

/// One convolution over `graph` applied to `n × in_width` features.
pub fn edgeconv_layer(
    g: &Graph,
    store: &ParamStore,
    p: &EdgeConvParams,
    graph: &DirectedGraph,
    h: Var,
) -> Result<Var> {
    if h.cols != p.in_width {
        return Err(Error::invalid(format!(
            "feature width {} does not match layer input width {}",
            h.cols, p.in_width
        )));
    }
    if graph.vertex_count != h.rows {
        return Err(Error::invalid("graph and features disagree on vertex count"));
    }
    let f = g.silu(g.linear(h, g.param(store, p.f_w), Some(g.param(store, p.f_b))));
    if graph.k == 0 {
        return Ok(f);
    }
    let w_self = g.param(store, p.g_self);
    let w_diff = g.param(store, p.g_diff);
    let src = g.linear(h, g.sub(w_self, w_diff), Some(g.param(store, p.g_b)));
    let dst = g.matmul(h, w_diff);
    Ok(g.add(f, g.edge_aggregate(src, dst, graph)))
}
