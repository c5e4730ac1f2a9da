//! Minimal differentiable model core: MLP feature extractor, affine heads,
//! hand-derived backprop, momentum SGD and flat-parameter arithmetic.

pub mod checkpoint;
mod network;
mod params;
mod sgd;

pub use network::{
    init_params, Branch, Forward, Gradients, Groups, Layouts, Model, NetworkSpec, INIT_STD,
};
pub use params::{weighted_average, Layout, LayoutEntry, ParamVector};
pub use sgd::{sgd_step, sgd_step_with_lr, SgdConfig};
