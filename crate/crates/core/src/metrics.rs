//! Training losses and evaluation metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{add, dist2, dot, scale, sub, Point3, PointCloud, TriangleMesh};
use crate::kdtree::KdTree;
use crate::patch::StitchWeights;

/// Presentation factor for metric tables; stored values are never scaled.
pub const REPORT_SCALE: f64 = 1e5;

fn nonempty(points: &[Point3], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    Ok(())
}

/// Nearest target point for each query (ties by lower index).
fn nearest_points(queries: &[Point3], targets: &[Point3]) -> Vec<(usize, f64)> {
    let tree = KdTree::new(targets);
    queries
        .par_iter()
        .map(|q| {
            let nb = tree.nearest(q).expect("targets are nonempty");
            (nb.index, nb.dist2)
        })
        .collect()
}

/// `Σ_i w_i · min_{q ∈ gt} ‖q − p_i‖²`.
pub fn recon_loss_weighted(pred: &[Point3], gt: &[Point3], weights: &[f64]) -> Result<f64> {
    nonempty(gt, "ground truth")?;
    if weights.len() != pred.len() {
        return Err(Error::invalid("one weight per predicted point is required"));
    }
    Ok(nearest_points(pred, gt)
        .iter()
        .zip(weights)
        .map(|((_, d2), w)| w * d2)
        .sum())
}

pub fn recon_loss(pred: &PointCloud, adaptive_gt: &PointCloud, weights: &StitchWeights) -> Result<f64> {
    recon_loss_weighted(&pred.points, &adaptive_gt.points, &weights.weights)
}

impl Graph {
    /// Differentiable weighted nearest-neighbour loss of `pred` (`n × 3`)
    /// against fixed targets. The assignment is a recorded decision and is
    /// held fixed in the backward pass.
    pub fn recon_loss(&self, pred: Var, gt: &[Point3], weights: &[f64]) -> Result<Var> {
        nonempty(gt, "ground truth")?;
        if pred.cols != 3 || weights.len() != pred.rows {
            return Err(Error::invalid("prediction must be n × 3 with one weight per row"));
        }
        let pv = self.value(pred);
        let pts: Vec<Point3> = pv.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let nn = self.choose_indices(pts.len(), || Ok(nearest_points(&pts, gt).iter().map(|x| x.0).collect()))?;
        if nn.iter().any(|&j| j >= gt.len()) {
            return Err(Error::Mode("replayed assignment does not fit the targets".into()));
        }
        let loss: f64 = pts.iter().zip(&nn).zip(weights).map(|((p, &j), w)| w * dist2(p, &gt[j])).sum();
        let mut grad = vec![0.0; pv.len()];
        for (i, (j, w)) in nn.iter().zip(weights).enumerate() {
            for k in 0..3 {
                grad[i * 3 + k] = 2.0 * w * (pts[i][k] - gt[*j][k]);
            }
        }
        Ok(self.custom(Tensor::scalar(loss), move |g, sink| {
            let s = g[0];
            let scaled: Vec<f64> = grad.iter().map(|v| v * s).collect();
            sink.add(pred, &scaled);
        }))
    }
}

/// Per-iteration loss terms and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: Vec<f64>,
    pub render: Vec<f64>,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: Vec<f64>, render: Vec<f64>, alpha: f64) -> Result<Self> {
        let total = total_loss(&recon, &render, alpha)?;
        Ok(Self {
            recon,
            render,
            alpha,
            total,
        })
    }
}

/// `Σ_t (recon_t + α · render_t)`.
pub fn total_loss(recon: &[f64], render: &[f64], alpha: f64) -> Result<f64> {
    if recon.len() != render.len() {
        return Err(Error::invalid("recon and render terms must pair up per iteration"));
    }
    Ok(recon.iter().zip(render).map(|(r, q)| r + alpha * q).sum())
}

/// Mean nearest-neighbour Euclidean distance in both directions.
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    nonempty(&p.points, "first cloud")?;
    nonempty(&q.points, "second cloud")?;
    let one_way = |a: &[Point3], b: &[Point3]| -> f64 {
        nearest_points(a, b).iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / a.len() as f64
    };
    Ok(one_way(&p.points, &q.points) + one_way(&q.points, &p.points))
}

/// Closest point of triangle `(a, b, c)` to `p`, by Voronoi region of the
/// triangle's vertices, edges and face.
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, &scale(&ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, &scale(&ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, &scale(&sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, &add(&scale(&ab, v), &scale(&ac, w)))
}

pub fn point_triangle_dist2(p: &Point3, tri: &[Point3; 3]) -> f64 {
    dist2(p, &closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]))
}

/// Point-to-face and face-to-point terms, both means of squared distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointToMesh {
    pub p2f: f64,
    pub f2p: f64,
}

impl PointToMesh {
    pub fn total(&self) -> f64 {
        self.p2f + self.f2p
    }
}

/// Exhaustive over point/face pairs, parallel over rows.
pub fn point_to_mesh(cloud: &PointCloud, mesh: &TriangleMesh) -> Result<PointToMesh> {
    nonempty(&cloud.points, "point cloud")?;
    if mesh.faces.is_empty() {
        return Err(Error::invalid("mesh has no faces"));
    }
    let tris: Vec<[Point3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
    let p2f: f64 = cloud
        .points
        .par_iter()
        .map(|p| tris.iter().map(|t| point_triangle_dist2(p, t)).fold(f64::INFINITY, f64::min))
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        / cloud.len() as f64;
    let f2p: f64 = tris
        .par_iter()
        .map(|t| cloud.points.iter().map(|p| point_triangle_dist2(p, t)).fold(f64::INFINITY, f64::min))
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        / tris.len() as f64;
    Ok(PointToMesh { p2f, f2p })
}
