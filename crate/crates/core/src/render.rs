//! Differentiable multi-view point rendering.
//!
//! Points are moved into camera space by `q = R p + t`, mapped
//! orthographically to `(u, v, depth) = ((q + 1) / 2)`, and splatted as
//! truncated Gaussians into a `H × W × D` density grid. Densities become
//! occupancies `o = 1 − exp(−ρ)`; a pixel's value is the probability that
//! its ray terminates in any depth bin, `Σ_d o_d Π_{d'<d} (1 − o_{d'})`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Normalization, Point3, PointCloud};

/// Truncation of the splat kernel in units of `s = r² / 2σ²` (three sigma).
const CUTOFF: f64 = 4.5;

/// `e^{−s}` minus its first-order expansion at the cutoff, so the kernel
/// and its slope both reach zero at three sigma.
fn kernel(s: f64) -> f64 {
    if s > CUTOFF {
        return 0.0;
    }
    let ec = (-CUTOFF).exp();
    (-s).exp() - ec * (1.0 - (s - CUTOFF))
}

fn kernel_slope(s: f64) -> f64 {
    if s > CUTOFF {
        return 0.0;
    }
    -(-s).exp() + (-CUTOFF).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    XY,
    YZ,
    XZ,
}

impl Plane {
    /// Rows are the camera-space x, y and viewing axes.
    pub fn basis(self) -> [[f64; 3]; 3] {
        match self {
            Plane::XY => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            Plane::YZ => [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
            Plane::XZ => [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
    /// Canonical plane the pose was generated from, if any.
    pub plane: Option<Plane>,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn new(rotation: [[f64; 3]; 3], translation: Point3, height: usize, width: usize) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| rotation[i][k] * rotation[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if height < 4 || width < 4 {
            return Err(Error::invalid("images must be at least 4 × 4"));
        }
        Ok(Self {
            rotation,
            translation,
            plane: None,
            height,
            width,
        })
    }

    /// Looking along the plane's normal, rotated in-plane by `angle`.
    pub fn on_plane(plane: Plane, angle: f64, height: usize, width: usize) -> Result<Self> {
        let mut c = Self::new(matmul3(&rot_z(angle), &plane.basis()), [0.0; 3], height, width)?;
        c.plane = Some(plane);
        Ok(c)
    }

    fn to_camera(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub views: usize,
    pub image_size: usize,
    pub depth_bins: usize,
    /// Splat standard deviation in pixels.
    pub splat_sigma: f64,
    /// Multiplier from kernel sum to density.
    pub density_scale: f64,
    pub planes: Vec<Plane>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            views: 32,
            image_size: 64,
            depth_bins: 32,
            splat_sigma: 1.0,
            density_scale: 0.5,
            planes: vec![Plane::XY, Plane::YZ, Plane::XZ],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::invalid("at least one view is required"));
        }
        if self.image_size < 4 || self.depth_bins < 2 {
            return Err(Error::invalid("image size ≥ 4 and depth bins ≥ 2 are required"));
        }
        if !(self.splat_sigma > 0.0) || !(self.density_scale > 0.0) {
            return Err(Error::invalid("splat sigma and density scale must be positive"));
        }
        if self.planes.is_empty() {
            return Err(Error::invalid("at least one projection plane is required"));
        }
        Ok(())
    }

    /// Depth-axis sigma in bins; the same physical width as in-plane.
    fn depth_sigma(&self) -> f64 {
        self.splat_sigma * self.depth_bins as f64 / self.image_size as f64
    }
}

/// `K / P` evenly spaced in-plane rotations per plane, with the remainder
/// handed out one per plane in order.
pub fn cameras(config: &RenderConfig) -> Result<Vec<Camera>> {
    config.validate()?;
    let np = config.planes.len();
    let mut out = Vec::with_capacity(config.views);
    for (pi, &plane) in config.planes.iter().enumerate() {
        let count = config.views / np + usize::from(pi < config.views % np);
        for i in 0..count {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            out.push(Camera::on_plane(plane, angle, config.image_size, config.image_size)?);
        }
    }
    Ok(out)
}

/// `(u, v, depth)` in `[0, 1]³` for points inside the unit ball.
pub fn project_points(cloud: &PointCloud, camera: &Camera) -> Vec<Point3> {
    cloud
        .points
        .iter()
        .map(|p| {
            let q = camera.to_camera(p);
            [(q[0] + 1.0) / 2.0, (q[1] + 1.0) / 2.0, (q[2] + 1.0) / 2.0]
        })
        .collect()
}

/// Row-major `H × W × D` grid; depth varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

impl Grid {
    fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![0.0; height * width * depth],
        }
    }

    pub fn at(&self, row: usize, col: usize, d: usize) -> f64 {
        self.data[(row * self.width + col) * self.depth + d]
    }
}

/// Continuous voxel coordinates (column, row, bin) of a projected point;
/// integer values are voxel centres.
fn voxel_coords(proj: &Point3, h: usize, w: usize, d: usize) -> Point3 {
    [
        proj[0] * w as f64 - 0.5,
        proj[1] * h as f64 - 0.5,
        proj[2] * d as f64 - 0.5,
    ]
}

fn axis_range(center: f64, radius: f64, len: usize) -> std::ops::Range<usize> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(len as f64 - 1.0);
    if hi < lo {
        return 0..0;
    }
    lo as usize..hi as usize + 1
}

/// Visits every voxel in a point's support with `(index, s, ds/dx, ds/dy, ds/dz)`.
fn for_support(
    c: &Point3,
    grid: (usize, usize, usize),
    sigma: f64,
    sigma_z: f64,
    mut f: impl FnMut(usize, f64, f64, f64, f64),
) {
    let (h, w, d) = grid;
    let r = 3.0 * sigma;
    let rz = 3.0 * sigma_z;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let inv_z = 1.0 / (2.0 * sigma_z * sigma_z);
    for row in axis_range(c[1], r, h) {
        let dy = c[1] - row as f64;
        for col in axis_range(c[0], r, w) {
            let dx = c[0] - col as f64;
            let sxy = (dx * dx + dy * dy) * inv;
            if sxy > CUTOFF {
                continue;
            }
            for bin in axis_range(c[2], rz, d) {
                let dz = c[2] - bin as f64;
                let s = sxy + dz * dz * inv_z;
                if s <= CUTOFF {
                    f((row * w + col) * d + bin, s, 2.0 * dx * inv, 2.0 * dy * inv, 2.0 * dz * inv_z);
                }
            }
        }
    }
}

/// Density grid `ρ = density_scale · Σ_points k(s)`.
pub fn splat_density(projected: &[Point3], height: usize, width: usize, config: &RenderConfig) -> Grid {
    let d = config.depth_bins;
    let mut grid = Grid::zeros(height, width, d);
    for p in projected {
        let c = voxel_coords(p, height, width, d);
        for_support(&c, (height, width, d), config.splat_sigma, config.depth_sigma(), |i, s, _, _, _| {
            grid.data[i] += kernel(s);
        });
    }
    grid.data.iter_mut().for_each(|v| *v *= config.density_scale);
    grid
}

/// Occupancy `1 − exp(−ρ)` of the splatted density.
pub fn splat_occupancy(projected: &[Point3], height: usize, width: usize, config: &RenderConfig) -> Grid {
    let mut grid = splat_density(projected, height, width, config);
    grid.data.iter_mut().for_each(|v| *v = -(-*v).exp_m1());
    grid
}

/// Per-pixel probability that the ray stops in some bin, marching from
/// bin 0 outwards.
pub fn ray_terminate(occupancy: &Grid) -> Vec<f64> {
    occupancy
        .data
        .chunks_exact(occupancy.depth)
        .map(|ray| {
            let mut transmit = 1.0;
            let mut total = 0.0;
            for &o in ray {
                total += o * transmit;
                transmit *= 1.0 - o;
            }
            total
        })
        .collect()
}

/// `∂image/∂o_d = Π_{d' ≠ d} (1 − o_{d'})` for one ray, from prefix and
/// suffix products.
fn termination_slopes(ray: &[f64], out: &mut [f64]) {
    let n = ray.len();
    let mut prefix = 1.0;
    for d in 0..n {
        out[d] = prefix;
        prefix *= 1.0 - ray[d];
    }
    let mut suffix = 1.0;
    for d in (0..n).rev() {
        out[d] *= suffix;
        suffix *= 1.0 - ray[d];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// Row-major `H × W`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub camera: Camera,
}

fn render_one(points: &[Point3], camera: &Camera, config: &RenderConfig) -> Vec<f64> {
    let cloud = PointCloud::new(points.to_vec());
    let proj = project_points(&cloud, camera);
    ray_terminate(&splat_occupancy(&proj, camera.height, camera.width, config))
}

/// Every configured view of a cloud in the unit ball.
pub fn render_views(cloud: &PointCloud, config: &RenderConfig) -> Result<Vec<RenderedView>> {
    let cams = cameras(config)?;
    Ok(cams
        .into_par_iter()
        .map(|camera| RenderedView {
            image: render_one(&cloud.points, &camera, config),
            camera,
        })
        .collect())
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean over views of the mean absolute pixel difference.
pub fn render_loss(pred: &PointCloud, target: &PointCloud, config: &RenderConfig) -> Result<f64> {
    let cams = cameras(config)?;
    let per_view: Vec<f64> = cams
        .par_iter()
        .map(|c| mean_abs(&render_one(&pred.points, c, config), &render_one(&target.points, c, config)))
        .collect();
    Ok(per_view.iter().sum::<f64>() / cams.len() as f64)
}

/// Gradient of `Σ_pixels weight · image` w.r.t. point coordinates.
fn image_backward(points: &[Point3], camera: &Camera, config: &RenderConfig, pixel_grad: &[f64]) -> Vec<f64> {
    let (h, w, d) = (camera.height, camera.width, config.depth_bins);
    let cloud = PointCloud::new(points.to_vec());
    let proj = project_points(&cloud, camera);
    let occ = splat_occupancy(&proj, h, w, config);
    // ∂L/∂ρ per voxel = ∂L/∂image · ∂image/∂o · (1 − o)
    let mut g_rho = vec![0.0; occ.data.len()];
    let mut slopes = vec![0.0; d];
    for (px, ray) in occ.data.chunks_exact(d).enumerate() {
        let gp = pixel_grad[px];
        if gp == 0.0 {
            continue;
        }
        termination_slopes(ray, &mut slopes);
        for b in 0..d {
            g_rho[px * d + b] = gp * slopes[b] * (1.0 - ray[b]);
        }
    }
    let r = &camera.rotation;
    let scale_xyz = [w as f64 / 2.0, h as f64 / 2.0, d as f64 / 2.0];
    let mut out = vec![0.0; points.len() * 3];
    for (i, p) in proj.iter().enumerate() {
        let c = voxel_coords(p, h, w, d);
        let mut gc = [0.0; 3];
        for_support(&c, (h, w, d), config.splat_sigma, config.depth_sigma(), |idx, s, sx, sy, sz| {
            let g = g_rho[idx] * config.density_scale * kernel_slope(s);
            gc[0] += g * sx;
            gc[1] += g * sy;
            gc[2] += g * sz;
        });
        // voxel coordinate k depends on the point through (W/2, H/2, D/2) · R[k]
        for k in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] += gc[k] * scale_xyz[k] * r[k][j];
            }
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    /// Differentiable render loss of `pred` (`n × 3`, unit-ball frame)
    /// against a fixed target in the same frame.
    pub fn render_loss(&self, pred: Var, target: &[Point3], config: &RenderConfig) -> Result<Var> {
        if pred.cols != 3 {
            return Err(Error::invalid("prediction must be n × 3"));
        }
        let cams = cameras(config)?;
        let pts: Vec<Point3> = self.value(pred).data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let diffs: Vec<Vec<f64>> = cams
            .par_iter()
            .map(|c| {
                let a = render_one(&pts, c, config);
                let b = render_one(target, c, config);
                a.iter().zip(&b).map(|(x, y)| x - y).collect()
            })
            .collect();
        let pixels = diffs.first().map_or(0, Vec::len);
        let all_signs = self.choose_signs(pixels * cams.len(), || diffs.iter().flatten().map(|&d| sign(d)).collect())?;
        // s · d is |d| whenever s is the sign of d
        let per_view: Vec<(f64, Vec<f64>)> = diffs
            .iter()
            .zip(all_signs.chunks_exact(pixels.max(1)))
            .map(|(d, s)| (d.iter().zip(s).map(|(x, y)| x * y).sum::<f64>() / pixels as f64, s.to_vec()))
            .collect();
        let k = cams.len() as f64;
        let loss = per_view.iter().map(|v| v.0).sum::<f64>() / k;
        let config = config.clone();
        Ok(self.custom(Tensor::scalar(loss), move |g, sink| {
            let grads: Vec<Vec<f64>> = cams
                .par_iter()
                .zip(&per_view)
                .map(|(cam, (_, signs))| {
                    let norm = g[0] / (k * signs.len() as f64);
                    let pixel: Vec<f64> = signs.iter().map(|s| s * norm).collect();
                    image_backward(&pts, cam, &config, &pixel)
                })
                .collect();
            let slot = sink.slot(pred);
            for gv in &grads {
                for (s, v) in slot.iter_mut().zip(gv) {
                    *s += v;
                }
            }
        }))
    }
}

/// Render loss of `pred` and `target`, each given in world coordinates with
/// the frame that maps it into the unit ball. The frames must agree.
pub fn render_loss_in_frame(
    g: &Graph,
    pred: Var,
    pred_frame: &Normalization,
    target: &[Point3],
    target_frame: &Normalization,
    config: &RenderConfig,
) -> Result<Var> {
    if pred_frame != target_frame {
        return Err(Error::invalid("prediction and target use different normalizations"));
    }
    let shift = g.constant(Tensor::new(1, 3, pred_frame.center.iter().map(|v| -v).collect()));
    let local = g.scale(g.add_row(pred, shift), 1.0 / pred_frame.scale);
    let target_local: Vec<Point3> = target.iter().map(|p| target_frame.apply(p)).collect();
    g.render_loss(local, &target_local, config)
}
