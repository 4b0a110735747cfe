//! The denoising network and its iteration driver.

pub mod edgeconv;
pub mod filter;
pub mod module;
pub mod schedule;

pub use edgeconv::{edgeconv_layer, EdgeConvParams};
pub use filter::{example_loss, filter_patch, iterative_filter, Example, FilterOptions, ObjectiveConfig};
pub use module::{
    decode, denoise_module, encode, module_step, sequence_order, DenoiseModuleParams, NetConfig,
};
pub use schedule::{adaptive_gt, adaptive_gt_with_radius, Decay, IterationSchedule};
