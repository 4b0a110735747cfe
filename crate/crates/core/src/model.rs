//! A trained filter: configuration, parameters and the module handles, plus
//! the versioned JSON checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::net::{iterative_filter, DenoiseModuleParams};
use crate::rng::GaussianStream;

pub const FORMAT_VERSION: u32 = 1;

/// Stream tag for parameter initialization.
const INIT_TAG: u64 = 0x1417;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: RunConfig,
    tensors: Vec<TensorRecord>,
}

fn module_prefix(i: usize) -> String {
    format!("module{i}")
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub modules: Vec<DenoiseModuleParams>,
}

impl Model {
    /// Fresh parameters drawn from the configuration's seed.
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = GaussianStream::derived(config.seed, INIT_TAG);
        let modules = (0..config.modules)
            .map(|i| DenoiseModuleParams::init(&mut store, &module_prefix(i), config.net_config(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            store,
            modules,
        })
    }

    /// Zeroes every decoder output layer, making the filter the identity.
    pub fn zero_decoders(&mut self) {
        for m in &self.modules {
            m.zero_decoder(&mut self.store);
        }
    }

    pub fn denoise(&self, noisy: &PointCloud) -> Result<PointCloud> {
        iterative_filter(noisy, &self.store, &self.modules, &self.config.filter_options())
    }

    /// Errors unless `config` describes the same parameter shapes.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        match self.config.architecture_mismatch(config) {
            None => Ok(()),
            Some(key) => Err(Error::Checkpoint(format!(
                "checkpoint (format {FORMAT_VERSION}) was saved with a different {key}"
            ))),
        }
    }

    /// Same parameters, with run-time settings (iterations, patch size,
    /// normalization, ...) taken from `config`.
    pub fn with_config(mut self, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        self.check_compatible(config)?;
        self.config = config.clone();
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .store
            .params()
            .iter()
            .map(|p| TensorRecord {
                name: p.name.clone(),
                shape: [p.value.rows, p.value.cols],
                data: p.value.data.clone(),
            })
            .collect();
        let ck = Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let mut text = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
        let mut store = ParamStore::new();
        for t in ck.tensors {
            if t.shape[0] * t.shape[1] != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor {} holds non-finite values", t.name)));
            }
            if store.find(&t.name).is_some() {
                return Err(Error::Checkpoint(format!("tensor {} appears twice", t.name)));
            }
            store.add(t.name, Tensor::new(t.shape[0], t.shape[1], t.data));
        }
        let modules = (0..ck.config.modules)
            .map(|i| {
                DenoiseModuleParams::find(&store, &module_prefix(i), ck.config.net_config()).map_err(|e| match e {
                    Error::Checkpoint(m) => Error::Checkpoint(m),
                    other => Error::Checkpoint(other.to_string()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: ck.config,
            store,
            modules,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
