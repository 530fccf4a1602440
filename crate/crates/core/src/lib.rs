pub mod autograd;
pub mod checkpoint;
pub mod dual_encoder;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod renderer;
pub mod scene_data;
pub mod scene_encoder;
pub mod sqa_model;
pub mod tensor;
pub mod vqa_model;

pub use error::{Error, Result};
