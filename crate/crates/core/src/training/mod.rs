//! Losses, synthetic data and the optimisation loop.

pub mod eval;
pub mod losses;
pub mod optim;
pub mod teacher;
pub mod textures;
pub mod trainer;
pub mod warp;

pub use losses::{total_loss, KpTarget, LossParts, LossWeights};
pub use optim::{staircase_lr, Adam, AdamConfig};
pub use teacher::{CellLabels, HarrisTeacher, KeypointTeacher, PrecomputedTeacher};
pub use textures::procedural_texture;
pub use trainer::{compute_losses, procedural_bases, synthetic_dataset, StepReport, TrainConfig, TrainSample, Trainer};
pub use warp::{synth_warp_pair, CorrespondenceSet, WarpPair, WarpParams};
pub use eval::{evaluate_pairs, WarpMatchStats};
