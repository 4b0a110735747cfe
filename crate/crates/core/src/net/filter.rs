//! The iteration driver: inference over a whole cloud and the training
//! objective over one example.

use rayon::prelude::*;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit, Normalization, Point3, PointCloud};
use crate::metrics::LossBreakdown;
use crate::net::module::{denoise_module, module_step, points_tensor, DenoiseModuleParams};
use crate::net::schedule::{adaptive_gt_with_radius, IterationSchedule};
use crate::patch::{extract_patches, stitch_patches, stitch_weights, Patch, SeedStrategy};
use crate::render::{render_loss_in_frame, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    pub iterations: usize,
    pub patch_size: usize,
    /// Filter in the unit-ball frame of the input and map back afterwards.
    pub normalize: bool,
}

fn check_modules(modules: &[DenoiseModuleParams], iterations: usize) -> Result<()> {
    if modules.is_empty() {
        return Err(Error::invalid("at least one module is required"));
    }
    if iterations == 0 {
        return Err(Error::invalid("at least one iteration is required"));
    }
    Ok(())
}

/// Runs every module `iterations` times over one patch.
pub fn filter_patch(
    patch: &Patch,
    store: &ParamStore,
    modules: &[DenoiseModuleParams],
    iterations: usize,
) -> Result<Patch> {
    check_modules(modules, iterations)?;
    let mut p = patch.clone();
    for _ in 0..iterations {
        for m in modules {
            p = denoise_module(&p, store, m)?;
        }
    }
    Ok(p)
}

/// Extracts covering patches once, filters each through all iterations and
/// modules, and stitches the results. Patches are processed in parallel;
/// each is independent, so the result does not depend on the thread count.
pub fn iterative_filter(
    noisy: &PointCloud,
    store: &ParamStore,
    modules: &[DenoiseModuleParams],
    options: &FilterOptions,
) -> Result<PointCloud> {
    check_modules(modules, options.iterations)?;
    noisy.validate()?;
    let (work, frame) = if options.normalize {
        normalize_to_unit(noisy)?
    } else {
        (noisy.clone(), Normalization::IDENTITY)
    };
    let n = work.len();
    let patches = extract_patches(&work, options.patch_size.min(n), SeedStrategy::FarthestPoint)?;
    let denoised = patches
        .par_iter()
        .map(|p| filter_patch(p, store, modules, options.iterations).map(|q| q.to_cloud()))
        .collect::<Result<Vec<_>>>()?;
    let stitched = stitch_patches(&patches, &denoised, n)?;
    // apply the displacement in the caller's frame so that an unchanged
    // cloud comes back bit for bit
    let points = noisy
        .points
        .iter()
        .zip(&work.points)
        .zip(&stitched.points)
        .map(|((x, w), y)| {
            [
                x[0] + (y[0] - w[0]) * frame.scale,
                x[1] + (y[1] - w[1]) * frame.scale,
                x[2] + (y[2] - w[2]) * frame.scale,
            ]
        })
        .collect();
    Ok(PointCloud {
        points,
        indices: noisy.indices.clone(),
    })
}

/// What the training objective needs beyond the network itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub schedule: IterationSchedule,
    pub alpha: f64,
    pub render: RenderConfig,
    /// Length that σ_t is measured against (the whole cloud's radius).
    pub gt_radius: f64,
}

/// One training example: a noisy patch and the clean positions of the same
/// points, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub noisy: Patch,
    pub clean: Vec<Point3>,
}

/// The iterated objective on one example:
///
/// for each iteration `t`, pass the points through all modules, then add
/// `recon(pred, gt_t) + α · render(pred, gt_t)`, where `gt_t` is the clean
/// patch perturbed at level σ_t. Recon weights are the patch's stitch
/// weights; rendering happens in the frame centred on the reference point
/// and scaled by the patch radius.
pub fn example_loss(
    g: &Graph,
    store: &ParamStore,
    modules: &[DenoiseModuleParams],
    example: &Example,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<(Var, LossBreakdown)> {
    let iterations = objective.schedule.iterations;
    check_modules(modules, iterations)?;
    let patch = &example.noisy;
    if example.clean.len() != patch.len() {
        return Err(Error::invalid("clean and noisy example sizes differ"));
    }
    let weights = stitch_weights(patch)?.weights;
    let frame = Normalization {
        center: patch.reference,
        scale: patch.radius,
    };
    let clean = PointCloud::new(example.clean.clone());
    let mut x = g.constant(points_tensor(&patch.points));
    let mut total: Option<Var> = None;
    let mut recon = Vec::with_capacity(iterations);
    let mut render = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        let gt = adaptive_gt_with_radius(&clean, t, &objective.schedule, objective.gt_radius, seed)?;
        for m in modules {
            x = module_step(g, store, m, x, &patch.reference, patch.radius)?;
        }
        let r = g.recon_loss(x, &gt.points, &weights)?;
        recon.push(g.scalar(r));
        let mut term = r;
        if objective.alpha > 0.0 {
            let q = render_loss_in_frame(g, x, &frame, &gt.points, &frame, &objective.render)?;
            render.push(g.scalar(q));
            term = g.add(term, g.scale(q, objective.alpha));
        } else {
            render.push(0.0);
        }
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    let breakdown = LossBreakdown::new(recon, render, objective.alpha)?;
    Ok((total.expect("at least one iteration"), breakdown))
}
