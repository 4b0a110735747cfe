//! Patch extraction, per-patch KNN graphs and Gaussian-weighted stitching.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dist2, sub, Point3, PointCloud};
use crate::kdtree::{brute_force_knn_into, KdTree, Neighbor};
use crate::rng::GaussianStream;

/// A subset of a cloud around a reference point.
///
/// Points are stored in sequence order: ascending distance to the
/// reference point, ties by original index.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub points: Vec<Point3>,
    pub reference: Point3,
    pub radius: f64,
    pub original_indices: Vec<usize>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_cloud(&self) -> PointCloud {
        PointCloud::with_indices(self.points.clone(), self.original_indices.clone())
    }

    /// Same patch with replaced coordinates; reference, radius and indices kept.
    pub fn with_points(&self, points: Vec<Point3>) -> Patch {
        debug_assert_eq!(points.len(), self.points.len());
        Patch {
            points,
            reference: self.reference,
            radius: self.radius,
            original_indices: self.original_indices.clone(),
        }
    }

    /// Builds a patch from explicit members, computing the radius.
    pub fn from_members(cloud: &PointCloud, reference: Point3, members: Vec<usize>) -> Patch {
        let points: Vec<Point3> = members.iter().map(|&i| cloud.points[i]).collect();
        let radius = points
            .iter()
            .map(|p| dist2(p, &reference))
            .fold(0.0, f64::max)
            .sqrt();
        Patch {
            points,
            reference,
            radius,
            original_indices: members,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedStrategy {
    /// First seed is the point nearest the centroid; each further seed is the
    /// uncovered point farthest from all chosen seeds.
    #[default]
    FarthestPoint,
    /// Seeds drawn uniformly among uncovered points.
    Random(u64),
}

/// Partitions `cloud` into overlapping KNN patches until every point is
/// covered by at least one.
pub fn extract_patches(
    cloud: &PointCloud,
    patch_size: usize,
    strategy: SeedStrategy,
) -> Result<Vec<Patch>> {
    cloud.validate()?;
    let n = cloud.len();
    if patch_size == 0 || patch_size > n {
        return Err(Error::invalid(format!(
            "patch size {patch_size} must be in 1..={n}"
        )));
    }
    let tree = KdTree::new(&cloud.points);
    let centroid = cloud.centroid()?;
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut rng = match strategy {
        SeedStrategy::Random(s) => Some(GaussianStream::new(s)),
        SeedStrategy::FarthestPoint => None,
    };
    let mut seed = match &mut rng {
        Some(g) => g.index(n),
        None => tree.nearest(&centroid).expect("nonempty").index,
    };
    let mut patches = Vec::new();
    loop {
        let reference = cloud.points[seed];
        let mut nb = tree.knn(&reference, patch_size);
        if !nb.iter().any(|x| x.index == seed) {
            // duplicates of the seed with lower indices crowded it out
            *nb.last_mut().unwrap() = Neighbor {
                index: seed,
                dist2: 0.0,
            };
            nb.sort();
        }
        for x in &nb {
            if !covered[x.index] {
                covered[x.index] = true;
                remaining -= 1;
            }
        }
        let members: Vec<usize> = nb.iter().map(|x| x.index).collect();
        patches.push(Patch::from_members(cloud, reference, members));
        if remaining == 0 {
            break;
        }
        for (i, p) in cloud.points.iter().enumerate() {
            min_d2[i] = min_d2[i].min(dist2(p, &reference));
        }
        seed = match &mut rng {
            Some(g) => {
                let uncovered: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
                uncovered[g.index(uncovered.len())]
            }
            None => {
                let mut best = usize::MAX;
                for i in 0..n {
                    if !covered[i] && (best == usize::MAX || min_d2[i] > min_d2[best]) {
                        best = i;
                    }
                }
                best
            }
        };
    }
    Ok(patches)
}

/// A KNN digraph stored as a dense `vertex_count × k` neighbour table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    pub vertex_count: usize,
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl DirectedGraph {
    /// Graph with no edges; only useful in tests.
    pub fn empty(vertex_count: usize) -> Self {
        Self {
            vertex_count,
            k: 0,
            neighbors: Vec::new(),
        }
    }

    pub fn neighbors_of(&self, v: usize) -> &[usize] {
        &self.neighbors[v * self.k..(v + 1) * self.k]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.vertex_count).flat_map(move |v| self.neighbors_of(v).iter().map(move |&t| (v, t)))
    }

    /// Relabels vertices: vertex `i` of the result is vertex `order[i]` here.
    pub fn permuted(&self, order: &[usize]) -> DirectedGraph {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let mut neighbors = Vec::with_capacity(self.neighbors.len());
        for &old in order {
            neighbors.extend(self.neighbors_of(old).iter().map(|&t| inverse[t]));
        }
        DirectedGraph {
            vertex_count: self.vertex_count,
            k: self.k,
            neighbors,
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k >= n {
        return Err(Error::invalid(format!(
            "k = {k} must be smaller than the vertex count {n}"
        )));
    }
    Ok(())
}

/// Euclidean KNN graph over the patch coordinates. Ties break by lower index.
pub fn build_knn_graph(patch: &Patch, k: usize) -> Result<DirectedGraph> {
    knn_graph_points(&patch.points, k)
}

pub fn knn_graph_points(points: &[Point3], k: usize) -> Result<DirectedGraph> {
    let n = points.len();
    check_k(k, n)?;
    let tree = KdTree::new(points);
    let mut neighbors = Vec::with_capacity(n * k);
    for (v, p) in points.iter().enumerate() {
        let nb = tree.knn(p, k + 1);
        let mut taken = 0;
        for x in nb {
            if x.index != v && taken < k {
                neighbors.push(x.index);
                taken += 1;
            }
        }
    }
    Ok(DirectedGraph {
        vertex_count: n,
        k,
        neighbors,
    })
}

/// KNN graph in an arbitrary feature space (`rows × dim`, row-major).
pub fn knn_graph_features(features: &[f64], dim: usize, k: usize) -> Result<DirectedGraph> {
    let n = features.len() / dim;
    check_k(k, n)?;
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |buf, v| {
            let q = &features[v * dim..(v + 1) * dim];
            brute_force_knn_into(features, dim, q, k, Some(v), buf);
            buf.iter().map(|x| x.index).collect()
        })
        .collect();
    let neighbors = rows.concat();
    Ok(DirectedGraph {
        vertex_count: n,
        k,
        neighbors,
    })
}

/// Per-point Gaussian blending weights of a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchWeights {
    pub weights: Vec<f64>,
    pub support_radius: f64,
}

/// `w_i ∝ exp(−‖p_i − p_r‖² / 2r_s²)` with `r_s = r/3`, normalized over the patch.
pub fn stitch_weights(patch: &Patch) -> Result<StitchWeights> {
    if !(patch.radius > 0.0) {
        return Err(Error::DegenerateGeometry(
            "patch radius must be positive for stitch weights".into(),
        ));
    }
    let support_radius = patch.radius / 3.0;
    let denom = 2.0 * support_radius * support_radius;
    let raw: Vec<f64> = patch
        .points
        .iter()
        .map(|p| (-dist2(p, &patch.reference) / denom).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(StitchWeights {
        weights: raw.into_iter().map(|w| w / total).collect(),
        support_radius,
    })
}

/// Blends denoised patch copies back into a full cloud using each patch's
/// stitch weights.
pub fn stitch_patches(
    patches: &[Patch],
    denoised: &[PointCloud],
    original_size: usize,
) -> Result<PointCloud> {
    let weights = patches
        .iter()
        .map(stitch_weights)
        .collect::<Result<Vec<_>>>()?;
    stitch_with_weights(patches, denoised, &weights, original_size)
}

/// Per original index, the list of `(patch, slot)` copies in patch order.
pub(crate) fn copy_table(patches: &[Patch], original_size: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut copies: Vec<Vec<(usize, usize)>> = vec![Vec::new(); original_size];
    for (pi, patch) in patches.iter().enumerate() {
        for (slot, &j) in patch.original_indices.iter().enumerate() {
            if j >= original_size {
                return Err(Error::invalid(format!(
                    "patch {pi} references index {j} beyond cloud size {original_size}"
                )));
            }
            copies[j].push((pi, slot));
        }
    }
    if let Some(j) = copies.iter().position(|c| c.is_empty()) {
        return Err(Error::Coverage(j));
    }
    Ok(copies)
}

/// Weighted stitching with caller-supplied weights.
///
/// The blend is evaluated as `x_first + Σ w_k (x_k − x_first) / Σ w_k`, so
/// identical copies reproduce their common value exactly.
pub fn stitch_with_weights(
    patches: &[Patch],
    denoised: &[PointCloud],
    weights: &[StitchWeights],
    original_size: usize,
) -> Result<PointCloud> {
    if patches.len() != denoised.len() || patches.len() != weights.len() {
        return Err(Error::invalid("patches, denoised copies and weights must align"));
    }
    for (i, (p, d)) in patches.iter().zip(denoised).enumerate() {
        if p.len() != d.len() || p.len() != weights[i].weights.len() {
            return Err(Error::invalid(format!("patch {i} size mismatch")));
        }
    }
    let copies = copy_table(patches, original_size)?;
    let points = copies
        .iter()
        .map(|list| {
            let (p0, s0) = list[0];
            let first = denoised[p0].points[s0];
            if list.len() == 1 {
                return first;
            }
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for &(p, s) in list {
                let w = weights[p].weights[s];
                let d = sub(&denoised[p].points[s], &first);
                for k in 0..3 {
                    acc[k] += w * d[k];
                }
                wsum += w;
            }
            [
                first[0] + acc[0] / wsum,
                first[1] + acc[1] / wsum,
                first[2] + acc[2] / wsum,
            ]
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Loss weights for a stitched cloud: each point receives the sum of its
/// per-patch stitch weights, divided by the patch count (total mass 1).
pub fn stitched_point_weights(
    patches: &[Patch],
    weights: &[StitchWeights],
    original_size: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; original_size];
    for (p, w) in patches.iter().zip(weights) {
        for (&j, &wi) in p.original_indices.iter().zip(&w.weights) {
            out[j] += wi;
        }
    }
    let m = patches.len().max(1) as f64;
    out.iter_mut().for_each(|w| *w /= m);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::add;
    use std::collections::BTreeSet;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut g = GaussianStream::new(seed);
        PointCloud::new((0..n).map(|_| [g.uniform(), g.uniform(), g.uniform()]).collect())
    }

    fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| {
            dist2(&points[a], q)
                .total_cmp(&dist2(&points[b], q))
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }

    #[test]
    fn patch_equal_to_cloud_size_gives_one_patch() {
        let c = random_cloud(40, 1);
        let p = extract_patches(&c, 40, SeedStrategy::FarthestPoint).unwrap();
        assert_eq!(p.len(), 1);
        let set: BTreeSet<usize> = p[0].original_indices.iter().copied().collect();
        assert_eq!(set.len(), 40);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let c = random_cloud(10, 1);
        assert!(matches!(
            extract_patches(&c, 11, SeedStrategy::FarthestPoint),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn patches_cover_cloud_and_are_exact_knn() {
        let c = random_cloud(4000, 2);
        let patches = extract_patches(&c, 2000, SeedStrategy::FarthestPoint).unwrap();
        let mut union = BTreeSet::new();
        for p in &patches {
            union.extend(p.original_indices.iter().copied());
            assert_eq!(p.original_indices, brute_knn(&c.points, &p.reference, 2000));
            let r = p
                .points
                .iter()
                .map(|q| dist2(q, &p.reference))
                .fold(0.0, f64::max)
                .sqrt();
            assert_eq!(p.radius, r);
        }
        assert_eq!(union.len(), 4000);
    }

    #[test]
    fn random_seeds_also_cover() {
        let c = random_cloud(300, 3);
        let patches = extract_patches(&c, 64, SeedStrategy::Random(4)).unwrap();
        let union: BTreeSet<usize> = patches.iter().flat_map(|p| p.original_indices.clone()).collect();
        assert_eq!(union.len(), 300);
    }

    #[test]
    fn duplicate_points_still_terminate() {
        let c = PointCloud::new(vec![[0.0; 3]; 5]);
        let patches = extract_patches(&c, 1, SeedStrategy::FarthestPoint).unwrap();
        assert_eq!(patches.len(), 5);
    }

    fn patch_of(points: Vec<Point3>) -> Patch {
        let n = points.len();
        Patch::from_members(&PointCloud::new(points), [0.0; 3], (0..n).collect())
    }

    #[test]
    fn collinear_tie_prefers_lower_index() {
        let p = patch_of(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let g = build_knn_graph(&p, 1).unwrap();
        assert_eq!(g.neighbors_of(1), &[0]);
        assert_eq!(g.neighbors_of(0), &[1]);
        assert_eq!(g.neighbors_of(2), &[1]);
    }

    #[test]
    fn full_k_is_complete_digraph() {
        let c = random_cloud(7, 5);
        let p = patch_of(c.points);
        let g = build_knn_graph(&p, 6).unwrap();
        let edges: BTreeSet<(usize, usize)> = g.edges().collect();
        assert_eq!(edges.len(), 42);
        assert!(edges.iter().all(|(a, b)| a != b));
        assert!(matches!(build_knn_graph(&p, 7), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn knn_graph_matches_brute_force() {
        let c = random_cloud(64, 6);
        let p = patch_of(c.points.clone());
        let g = build_knn_graph(&p, 8).unwrap();
        for v in 0..64 {
            let mut expect = brute_knn(&c.points, &c.points[v], 9);
            expect.retain(|&i| i != v);
            expect.truncate(8);
            assert_eq!(g.neighbors_of(v), expect.as_slice());
        }
        let fg = knn_graph_features(&c.flat(), 3, 8).unwrap();
        assert_eq!(fg, g);
    }

    #[test]
    fn knn_graph_is_permutation_equivariant() {
        let c = random_cloud(50, 7);
        let g = knn_graph_points(&c.points, 5).unwrap();
        let order: Vec<usize> = (0..50).rev().collect();
        let permuted: Vec<Point3> = order.iter().map(|&i| c.points[i]).collect();
        let gp = knn_graph_points(&permuted, 5).unwrap();
        assert_eq!(gp, g.permuted(&order));
    }

    #[test]
    fn equidistant_patch_has_uniform_weights() {
        let pts = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let w = stitch_weights(&patch_of(pts)).unwrap();
        for x in &w.weights {
            assert!((x - 0.2).abs() < 1e-15);
        }
        assert!((w.support_radius - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reference_point_gets_largest_weight() {
        let mut pts = random_cloud(10, 8).points;
        pts[3] = [0.0; 3];
        let w = stitch_weights(&patch_of(pts)).unwrap();
        for (i, x) in w.weights.iter().enumerate() {
            if i != 3 {
                assert!(w.weights[3] > *x);
            }
        }
    }

    #[test]
    fn weights_match_term_by_term_formula() {
        let pts = random_cloud(10, 9).points;
        let p = patch_of(pts.clone());
        let w = stitch_weights(&p).unwrap();
        let r = pts
            .iter()
            .map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt())
            .fold(0.0, f64::max);
        let rs = r / 3.0;
        let terms: Vec<f64> = pts
            .iter()
            .map(|q| (-(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]) / (2.0 * rs * rs)).exp())
            .collect();
        let s: f64 = terms.iter().sum();
        for (a, t) in w.weights.iter().zip(&terms) {
            assert!((a - t / s).abs() < 1e-15);
        }
        let total: f64 = w.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_radius_is_degenerate() {
        let p = patch_of(vec![[0.0; 3]]);
        assert!(matches!(stitch_weights(&p), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn weights_are_rigid_motion_invariant() {
        let pts = random_cloud(12, 10).points;
        let p = Patch::from_members(&PointCloud::new(pts.clone()), pts[0], (0..12).collect());
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let mv = |q: &Point3| add(&[c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]], &[3.0, -2.0, 1.0]);
        let moved: Vec<Point3> = pts.iter().map(mv).collect();
        let q = Patch::from_members(&PointCloud::new(moved.clone()), moved[0], (0..12).collect());
        let a = stitch_weights(&p).unwrap();
        let b = stitch_weights(&q).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_patch_stitch_is_passthrough() {
        let c = random_cloud(30, 11);
        let patches = extract_patches(&c, 30, SeedStrategy::FarthestPoint).unwrap();
        let den: Vec<PointCloud> = patches
            .iter()
            .map(|p| PointCloud::new(p.points.iter().map(|q| add(q, &[0.1, 0.0, 0.0])).collect()))
            .collect();
        let out = stitch_patches(&patches, &den, 30).unwrap();
        for (slot, &j) in patches[0].original_indices.iter().enumerate() {
            assert_eq!(out.points[j], den[0].points[slot]);
        }
    }

    #[test]
    fn disjoint_patches_concatenate_in_index_order() {
        let c = random_cloud(6, 12);
        let a = Patch::from_members(&c, c.points[4], vec![4, 0, 2]);
        let b = Patch::from_members(&c, c.points[1], vec![1, 5, 3]);
        let den = vec![a.to_cloud(), b.to_cloud()];
        let out = stitch_patches(&[a, b], &den, 6).unwrap();
        assert_eq!(out.points, c.points);
    }

    #[test]
    fn overlapping_patches_blend_with_weights() {
        let c = random_cloud(4, 13);
        let a = Patch::from_members(&c, c.points[0], vec![0, 1, 2]);
        let b = Patch::from_members(&c, c.points[3], vec![3, 2, 1]);
        let da = PointCloud::new(vec![[0.0; 3], [1.0, 1.0, 1.0], [2.0, 0.0, 0.0]]);
        let db = PointCloud::new(vec![[9.0; 3], [4.0, 0.0, 0.0], [3.0, 3.0, 3.0]]);
        let wa = StitchWeights {
            weights: vec![0.5, 0.2, 0.3],
            support_radius: 1.0,
        };
        let wb = StitchWeights {
            weights: vec![0.1, 0.6, 0.3],
            support_radius: 1.0,
        };
        let out = stitch_with_weights(&[a, b], &[da, db], &[wa, wb], 4).unwrap();
        // index 1: (0.2·(1,1,1) + 0.3·(3,3,3)) / 0.5 = (2.2, 2.2, 2.2)
        // index 2: (0.3·(2,0,0) + 0.6·(4,0,0)) / 0.9 = (10/3, 0, 0)
        for k in 0..3 {
            assert!((out.points[1][k] - 2.2).abs() < 1e-14);
        }
        assert!((out.points[2][0] - 10.0 / 3.0).abs() < 1e-14);
        assert_eq!(out.points[2][1], 0.0);
        assert_eq!(out.points[0], [0.0; 3]);
        assert_eq!(out.points[3], [9.0; 3]);
    }

    #[test]
    fn identity_denoising_reproduces_cloud_exactly() {
        let c = random_cloud(500, 14);
        let patches = extract_patches(&c, 100, SeedStrategy::FarthestPoint).unwrap();
        let den: Vec<PointCloud> = patches.iter().map(Patch::to_cloud).collect();
        let out = stitch_patches(&patches, &den, 500).unwrap();
        assert_eq!(out.points, c.points);
    }

    #[test]
    fn missing_index_is_a_coverage_error() {
        let c = random_cloud(3, 15);
        let a = Patch::from_members(&c, c.points[0], vec![0, 1]);
        let den = vec![a.to_cloud()];
        assert!(matches!(stitch_patches(&[a], &den, 3), Err(Error::Coverage(2))));
    }
}
