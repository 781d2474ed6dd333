//! The latent radiance field: positional encoding, the field MLP, ray
//! generation, latent volume rendering, and the training step that combines
//! reconstruction, refinement, and camera-regularization losses.

pub mod encoding;
pub mod mlp;
pub mod render;
pub mod train;

pub use encoding::positional_encode;
pub use mlp::{FieldArch, FieldState};
pub use render::{
    all_pixels, generate_rays, render_ray, render_view, shade_ray, Ray, RayShade, RenderConfig,
};
pub use train::{
    evaluate_losses, fit, loss_reconstruction, loss_reconstruction_rays, loss_total, train_step,
    weights_at, Adam, FitConfig, LossReport, LossWeights, OptimizerState, Patch, Phase, RayBatch,
    TrainStepConfig,
};
