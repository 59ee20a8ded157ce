//! Learned velocity field, its training objective, Euler inference and
//! checkpoint storage.

pub mod checkpoint;
pub mod model;
mod nn;
pub mod sampler;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta};
pub use model::{tau_embed, Arch, KernelArch, ParamBlock, TrainSample, VelocityModel};
pub use sampler::{euler_assimilate, euler_integrate, FlowConfig};
