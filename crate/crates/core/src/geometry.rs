//! Point cloud and mesh containers, bounding geometry, normalization and
//! noise synthesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::GaussianStream;

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

/// An ordered list of 3D points, optionally tagged with indices into some
/// larger original cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub indices: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            indices: None,
        }
    }

    pub fn with_indices(points: Vec<Point3>, indices: Vec<usize>) -> Self {
        Self {
            points,
            indices: Some(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fails on an empty cloud or non-finite coordinates.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("empty point cloud"));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Result<Point3> {
        self.validate()?;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        Ok([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Flattened row-major `n × 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Triangle mesh with validated face indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!(
                    "face {fi} references a vertex out of range (vertex count {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} is degenerate")));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        let f = self.faces[face];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReference {
    BboxDiagonal,
    BoundingSphereRadius,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_fraction: f64,
    pub reference: NoiseReference,
    pub seed: u64,
}

pub fn bbox_diagonal(cloud: &PointCloud) -> Result<f64> {
    cloud.validate()?;
    let mut lo = cloud.points[0];
    let mut hi = cloud.points[0];
    for p in &cloud.points[1..] {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    Ok(norm(&sub(&hi, &lo)))
}

/// Radius of the centroid-centered sphere enclosing every point.
pub fn bounding_sphere_radius(cloud: &PointCloud) -> Result<f64> {
    let c = cloud.centroid()?;
    Ok(cloud
        .points
        .iter()
        .map(|p| dist2(p, &c))
        .fold(0.0, f64::max)
        .sqrt())
}

pub fn reference_length(cloud: &PointCloud, reference: NoiseReference) -> Result<f64> {
    match reference {
        NoiseReference::BboxDiagonal => bbox_diagonal(cloud),
        NoiseReference::BoundingSphereRadius => bounding_sphere_radius(cloud),
    }
}

/// Perturbs every coordinate with i.i.d. `N(0, σ²)`, where
/// `σ = sigma_fraction × reference length`.
pub fn add_gaussian_noise(cloud: &PointCloud, spec: &NoiseSpec) -> Result<PointCloud> {
    if !(spec.sigma_fraction >= 0.0) {
        return Err(Error::invalid("sigma_fraction must be non-negative"));
    }
    let sigma = spec.sigma_fraction * reference_length(cloud, spec.reference)?;
    Ok(perturb(cloud, sigma, spec.seed))
}

/// Adds `N(0, sigma²)` noise with an absolute standard deviation.
pub(crate) fn perturb(cloud: &PointCloud, sigma: f64, seed: u64) -> PointCloud {
    if sigma == 0.0 {
        return cloud.clone();
    }
    let mut g = GaussianStream::new(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                p[0] + sigma * g.standard_normal(),
                p[1] + sigma * g.standard_normal(),
                p[2] + sigma * g.standard_normal(),
            ]
        })
        .collect();
    PointCloud {
        points,
        indices: cloud.indices.clone(),
    }
}

/// Maps `x ↦ (x − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn apply(&self, p: &Point3) -> Point3 {
        scale(&sub(p, &self.center), 1.0 / self.scale)
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        add(&scale(p, self.scale), &self.center)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply(p)).collect(),
            indices: cloud.indices.clone(),
        }
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.invert(p)).collect(),
            indices: cloud.indices.clone(),
        }
    }
}

/// Centers the cloud on its centroid and scales it to a unit bounding sphere.
pub fn normalize_to_unit(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let center = cloud.centroid()?;
    let radius = bounding_sphere_radius(cloud)?;
    if radius == 0.0 {
        return Err(Error::DegenerateGeometry(
            "all points coincide; cannot normalize".into(),
        ));
    }
    let tf = Normalization {
        center,
        scale: radius,
    };
    Ok((tf.apply_cloud(cloud), tf))
}
