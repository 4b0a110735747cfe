//! Training: synthetic noisy inputs, per-patch objectives run in parallel,
//! deterministic gradient reduction and Adam updates.

use rayon::prelude::*;

use crate::autodiff::{Adam, AdamConfig, Gradients, Graph};
use crate::error::{Error, Result};
use crate::geometry::{bounding_sphere_radius, normalize_to_unit, perturb, Point3, PointCloud};
use crate::io::LossRow;
use crate::kdtree::KdTree;
use crate::metrics::LossBreakdown;
use crate::model::Model;
use crate::net::{example_loss, Example, ObjectiveConfig};
use crate::patch::Patch;
use crate::rng::{mix_seed, GaussianStream};

/// Union of a sphere and an axis-aligned box that overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereBox {
    pub sphere_center: Point3,
    pub sphere_radius: f64,
    pub box_center: Point3,
    pub box_half: f64,
}

impl Default for SphereBox {
    fn default() -> Self {
        Self {
            sphere_center: [-0.3, 0.0, 0.0],
            sphere_radius: 0.5,
            box_center: [0.35, 0.0, 0.0],
            box_half: 0.3,
        }
    }
}

impl SphereBox {
    fn in_sphere(&self, p: &Point3) -> bool {
        let d2: f64 = (0..3).map(|k| (p[k] - self.sphere_center[k]).powi(2)).sum();
        d2 < self.sphere_radius * self.sphere_radius
    }

    fn in_box(&self, p: &Point3) -> bool {
        (0..3).all(|k| (p[k] - self.box_center[k]).abs() < self.box_half)
    }

    /// Distance from `p` to the boundary of the union.
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        let ds = (0..3).map(|k| (p[k] - self.sphere_center[k]).powi(2)).sum::<f64>().sqrt() - self.sphere_radius;
        let q: Vec<f64> = (0..3).map(|k| (p[k] - self.box_center[k]).abs() - self.box_half).collect();
        let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let db = outside + q.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(0.0);
        // signed distance of a union is the minimum; its magnitude is exact
        // outside and a lower bound inside, which is all the tests need
        ds.min(db).abs()
    }

    /// `n` points uniformly distributed over the union's boundary: candidates
    /// are drawn from each surface in proportion to its area and kept when
    /// they are not inside the other solid.
    pub fn sample(&self, n: usize, seed: u64) -> PointCloud {
        let mut g = GaussianStream::new(seed);
        let sphere_area = 4.0 * std::f64::consts::PI * self.sphere_radius.powi(2);
        let box_area = 24.0 * self.box_half.powi(2);
        let p_sphere = sphere_area / (sphere_area + box_area);
        let mut points = Vec::with_capacity(n);
        while points.len() < n {
            if g.uniform() < p_sphere {
                let d = [g.standard_normal(), g.standard_normal(), g.standard_normal()];
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if len == 0.0 {
                    continue;
                }
                let p = std::array::from_fn(|k| self.sphere_center[k] + self.sphere_radius * d[k] / len);
                if !self.in_box(&p) {
                    points.push(p);
                }
            } else {
                let face = g.index(6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = [0.0; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    *v = self.box_center[k]
                        + if k == axis {
                            sign * self.box_half
                        } else {
                            g.uniform_range(-self.box_half, self.box_half)
                        };
                }
                if !self.in_sphere(&p) {
                    points.push(p);
                }
            }
        }
        PointCloud::new(points)
    }
}

/// Tags for the per-step random streams.
const STEP_TAG: u64 = 0x5354_4550;
const NOISE_TAG: u64 = 0x4e4f_4953;

/// A clean training cloud in the frame the model works in.
struct Prepared {
    clean: PointCloud,
    radius: f64,
}

fn prepare(cloud: &PointCloud, normalize: bool) -> Result<Prepared> {
    cloud.validate()?;
    if normalize {
        let (clean, _) = normalize_to_unit(cloud)?;
        Ok(Prepared { clean, radius: 1.0 })
    } else {
        let radius = bounding_sphere_radius(cloud)?;
        if radius == 0.0 {
            return Err(Error::DegenerateGeometry("all points coincide".into()));
        }
        Ok(Prepared {
            clean: cloud.clone(),
            radius,
        })
    }
}

/// The examples of one optimizer step: fresh noise on the whole cloud, then
/// `batch_patches` KNN patches around randomly chosen noisy points.
fn step_examples(model: &Model, data: &Prepared, step: usize) -> Vec<Example> {
    let cfg = &model.config;
    let mut rng = GaussianStream::derived(cfg.seed, mix_seed(STEP_TAG, step as u64));
    let level = rng.uniform_range(cfg.noise_min, cfg.noise_max);
    let noise_seed = mix_seed(mix_seed(cfg.seed, NOISE_TAG), step as u64);
    let noisy = perturb(&data.clean, level * data.radius, noise_seed);
    let n = noisy.len();
    let size = cfg.patch_size.min(n);
    let tree = KdTree::new(&noisy.points);
    (0..cfg.batch_patches)
        .map(|_| {
            let seed_index = rng.index(n);
            let reference = noisy.points[seed_index];
            let members: Vec<usize> = tree.knn(&reference, size).iter().map(|nb| nb.index).collect();
            let clean = members.iter().map(|&i| data.clean.points[i]).collect();
            Example {
                noisy: Patch::from_members(&noisy, reference, members),
                clean,
            }
        })
        .collect()
}

/// Loss and gradients of one example on its own tape.
fn example_gradients(
    model: &Model,
    example: &Example,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<(LossBreakdown, Gradients)> {
    let g = Graph::new();
    let (loss, breakdown) = example_loss(&g, &model.store, &model.modules, example, objective, seed)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: recon {:?}, render {:?}, patch radius {}, reference {:?}",
            breakdown.recon, breakdown.render, example.noisy.radius, example.noisy.reference
        )));
    }
    let grads = g.backward(loss)?;
    Ok((breakdown, grads))
}

/// Progress of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub total_steps: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Trains `model` in place on `clouds` for `epochs × clouds.len()` steps
/// and returns the loss log. Each step uses one cloud in turn, averages the
/// per-patch losses, clips the global gradient norm and applies Adam.
///
/// Patch gradients are computed in parallel and summed in patch order, so
/// the result is the same for any thread count.
pub fn train(
    model: &mut Model,
    clouds: &[PointCloud],
    mut progress: impl FnMut(&StepSummary),
) -> Result<Vec<LossRow>> {
    model.config.validate()?;
    if clouds.is_empty() {
        return Err(Error::invalid("training needs at least one clean cloud"));
    }
    let cfg = model.config.clone();
    let data = clouds
        .iter()
        .map(|c| prepare(c, cfg.normalize))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let total_steps = cfg.epochs * clouds.len();
    let batch = cfg.batch_patches;
    let mut rows = Vec::with_capacity(total_steps * cfg.iterations);
    for step in 1..=total_steps {
        let d = &data[(step - 1) % data.len()];
        let objective = cfg.objective(d.radius)?;
        let examples = step_examples(model, d, step);
        let results = examples
            .par_iter()
            .enumerate()
            .map(|(b, ex)| {
                let seed = mix_seed(cfg.seed, (step * batch + b) as u64);
                example_gradients(model, ex, &objective, seed)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
        let mut grads = Gradients::zeros_like(&model.store);
        let mut recon = vec![0.0; cfg.iterations];
        let mut render = vec![0.0; cfg.iterations];
        for (breakdown, g) in &results {
            grads.accumulate(g);
            for t in 0..cfg.iterations {
                recon[t] += breakdown.recon[t];
                render[t] += breakdown.render[t];
            }
        }
        let inv = 1.0 / batch as f64;
        grads.scale(inv);
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("step {step}: non-finite gradient")));
        }
        let grad_norm = grads.clip_global_norm(cfg.clip_norm);
        adam.step(&mut model.store, &grads)?;
        let mut loss = 0.0;
        for t in 0..cfg.iterations {
            let (r, q) = (recon[t] * inv, render[t] * inv);
            let total = r + cfg.alpha * q;
            loss += total;
            rows.push(LossRow {
                step,
                iter_t: t + 1,
                recon: r,
                render: q,
                total,
            });
        }
        progress(&StepSummary {
            step,
            total_steps,
            loss,
            grad_norm,
        });
    }
    Ok(rows)
}
