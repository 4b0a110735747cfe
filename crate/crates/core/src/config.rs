//! Run configuration: defaults, a flat `key = value` text format with `#`
//! comments, and validation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::net::{FilterOptions, IterationSchedule, NetConfig, ObjectiveConfig};
use crate::render::RenderConfig;
use crate::ssm::ScanMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Denoising modules per iteration (M).
    pub modules: usize,
    /// Outer iterations (T).
    pub iterations: usize,
    pub mamba_layers: usize,
    pub patch_size: usize,
    pub k_graph: usize,
    /// Weight of the rendering loss.
    pub alpha: f64,
    pub views: usize,
    pub image_size: usize,
    pub depth_bins: usize,
    pub splat_sigma: f64,
    pub density_scale: f64,
    pub lr: f64,
    /// Passes over the training clouds; one optimizer step per cloud.
    pub epochs: usize,
    pub seed: u64,
    pub normalize: bool,
    /// σ_1 of the adaptive target, as a fraction of the cloud radius.
    pub sigma_start: f64,
    /// Range of the synthetic input noise level drawn per training step.
    pub noise_min: f64,
    pub noise_max: f64,
    pub width: usize,
    pub state_dim: usize,
    pub expansion: usize,
    pub conv_width: usize,
    pub max_step: f64,
    /// Patches per optimizer step.
    pub batch_patches: usize,
    pub clip_norm: f64,
    pub scan_mode: ScanMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            modules: 4,
            iterations: 4,
            mamba_layers: 6,
            patch_size: 2000,
            k_graph: 16,
            alpha: 0.01,
            views: 32,
            image_size: 64,
            depth_bins: 32,
            splat_sigma: 1.0,
            density_scale: 0.5,
            lr: 1e-4,
            epochs: 100,
            seed: 0,
            normalize: true,
            sigma_start: 0.02,
            noise_min: 0.005,
            noise_max: 0.02,
            width: 32,
            state_dim: 16,
            expansion: 2,
            conv_width: 4,
            max_step: 0.01,
            batch_patches: 2,
            clip_norm: 1.0,
            scan_mode: ScanMode::Sequential,
        }
    }
}

/// Keys that fix parameter shapes; a checkpoint is only usable with a
/// configuration that agrees on all of them.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "modules",
    "mamba_layers",
    "k_graph",
    "width",
    "state_dim",
    "expansion",
    "conv_width",
    "max_step",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad value {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "modules" => self.modules = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "mamba_layers" => self.mamba_layers = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "k_graph" => self.k_graph = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "views" => self.views = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "depth_bins" => self.depth_bins = num(key, v)?,
            "splat_sigma" => self.splat_sigma = num(key, v)?,
            "density_scale" => self.density_scale = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "normalize" => self.normalize = boolean(key, v)?,
            "sigma_start" => self.sigma_start = num(key, v)?,
            "noise_min" => self.noise_min = num(key, v)?,
            "noise_max" => self.noise_max = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "state_dim" => self.state_dim = num(key, v)?,
            "expansion" => self.expansion = num(key, v)?,
            "conv_width" => self.conv_width = num(key, v)?,
            "max_step" => self.max_step = num(key, v)?,
            "batch_patches" => self.batch_patches = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "scan_mode" => {
                self.scan_mode = match v {
                    "sequential" => ScanMode::Sequential,
                    "associative" => ScanMode::Associative,
                    _ => return Err(Error::invalid(format!("bad value {v:?} for scan_mode"))),
                }
            }
            other => return Err(Error::invalid(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Does not validate.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected key = value"))?;
            self.set(k, v).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every field as a `key = value` line; [`RunConfig::from_text`] reads
    /// it back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let scan = match self.scan_mode {
            ScanMode::Sequential => "sequential",
            ScanMode::Associative => "associative",
        };
        vec![
            ("modules", self.modules.to_string()),
            ("iterations", self.iterations.to_string()),
            ("mamba_layers", self.mamba_layers.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("k_graph", self.k_graph.to_string()),
            ("alpha", self.alpha.to_string()),
            ("views", self.views.to_string()),
            ("image_size", self.image_size.to_string()),
            ("depth_bins", self.depth_bins.to_string()),
            ("splat_sigma", self.splat_sigma.to_string()),
            ("density_scale", self.density_scale.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("normalize", self.normalize.to_string()),
            ("sigma_start", self.sigma_start.to_string()),
            ("noise_min", self.noise_min.to_string()),
            ("noise_max", self.noise_max.to_string()),
            ("width", self.width.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("expansion", self.expansion.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("max_step", self.max_step.to_string()),
            ("batch_patches", self.batch_patches.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("scan_mode", scan.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("modules", self.modules),
            ("iterations", self.iterations),
            ("mamba_layers", self.mamba_layers),
            ("patch_size", self.patch_size),
            ("k_graph", self.k_graph),
            ("views", self.views),
            ("epochs", self.epochs),
            ("width", self.width),
            ("batch_patches", self.batch_patches),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{k} must be at least 1")));
            }
        }
        if self.k_graph >= self.patch_size {
            return Err(Error::invalid("k_graph must be smaller than patch_size"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.noise_min >= 0.0 && self.noise_min <= self.noise_max && self.noise_max.is_finite()) {
            return Err(Error::invalid("noise range must satisfy 0 ≤ noise_min ≤ noise_max"));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(Error::invalid("max_step must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        self.schedule()?;
        self.render_config().validate()?;
        self.net_config().validate()?;
        Ok(())
    }

    /// The first architecture key on which `self` and `other` differ.
    pub fn architecture_mismatch(&self, other: &RunConfig) -> Option<&'static str> {
        let a = self.entries();
        let b = other.entries();
        ARCHITECTURE_KEYS.iter().copied().find(|key| {
            let get = |e: &[(&'static str, String)]| e.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
            get(&a) != get(&b)
        })
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            width: self.width,
            k: self.k_graph,
            mamba_layers: self.mamba_layers,
            mamba: MambaConfig {
                state_dim: self.state_dim,
                expansion: self.expansion,
                conv_width: self.conv_width,
                scan_mode: self.scan_mode,
            },
            max_step: self.max_step,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            views: self.views,
            image_size: self.image_size,
            depth_bins: self.depth_bins,
            splat_sigma: self.splat_sigma,
            density_scale: self.density_scale,
            ..RenderConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<IterationSchedule> {
        IterationSchedule::new(self.iterations, self.sigma_start)
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            iterations: self.iterations,
            patch_size: self.patch_size,
            normalize: self.normalize,
        }
    }

    /// Training objective for clouds whose radius is `gt_radius`.
    pub fn objective(&self, gt_radius: f64) -> Result<ObjectiveConfig> {
        Ok(ObjectiveConfig {
            schedule: self.schedule()?,
            alpha: self.alpha,
            render: self.render_config(),
            gt_radius,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.modules, c.iterations, c.mamba_layers, c.patch_size), (4, 4, 6, 2000));
        assert_eq!((c.alpha, c.views, c.lr), (0.01, 32, 1e-4));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.alpha = 0.1 + 0.2;
        c.lr = 1.0 / 3.0 * 1e-3;
        c.seed = u64::MAX;
        c.normalize = false;
        c.scan_mode = ScanMode::Associative;
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::from_text("# toy\nmodules = 2   # two\n\n  alpha=0\nscan_mode = associative\n").unwrap();
        assert_eq!(c.modules, 2);
        assert_eq!(c.alpha, 0.0);
        assert_eq!(c.scan_mode, ScanMode::Associative);
        assert_eq!(c.iterations, 4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [("modules = 2\nbogus = 1\n", 2), ("\n\nalpha 3\n", 3), ("modules = -1", 1)] {
            match RunConfig::from_text(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn validation() {
        for text in ["modules = 0", "alpha = -0.1", "k_graph = 2000", "noise_min = 0.5", "views = 0", "lr = 0"] {
            assert!(matches!(RunConfig::from_text(text), Err(Error::InvalidInput(_))), "{text}");
        }
    }

    #[test]
    fn architecture_mismatch_names_the_key() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.patch_size = 100;
        b.lr = 1.0;
        assert_eq!(a.architecture_mismatch(&b), None);
        b.width = 8;
        assert_eq!(a.architecture_mismatch(&b), Some("width"));
    }
}
