//! Desk-scale verification substrate: procedural scenes, analytic oracle
//! denoisers, and a small trainable denoiser with finite-difference-verified
//! gradients, driving the training and distillation loops end to end in
//! pixel space (an identity codec stands in for a latent autoencoder, so
//! encode/decode round trips are exact by construction).

mod distill;
mod net;
mod oracle;
mod scene;
mod train;

pub use distill::{consistency_one_step, distill_lcm, DistillConfig, DistillOutcome};
pub use net::{ToyArch, ToyDenoiser};
pub use oracle::{GaussianDenoiser, PassthroughDenoiser, PointMassDenoiser};
pub use scene::{flat_scene, gen_scene, normals_from_depth, ToyScene};
pub use train::{train_denoiser, TrainConfig, TrainOutcome};
