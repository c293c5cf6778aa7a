//! Synthetic scenes and the SSIM-supervised training loop.

pub mod config;
pub mod scene;
pub mod step;
pub mod trainer;

pub use config::{
    check_plane_spacing, max_plane_displacement, sample_batch, serde_depth, Batch, Curriculum, TrainConfig,
};
pub use scene::{generate_scene, toy_rig, Layer, SceneFamily, SceneSpec, SyntheticScene, Texture, TOY_BASELINE};
pub use step::{batch_loss_and_grad, training_step, LossSettings, StepStats};
pub use trainer::{evaluate, test_pool, CheckpointMeta, EvalProtocol, EvalRow, MetricsRecord, RngState, Trainer};
