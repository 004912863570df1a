//! Reward fine-tuning of small conditional diffusion models: online policy
//! gradient with a KL anchor to the pretrained model, and reward-weighted
//! supervised fine-tuning on samples from that model.

// `!(x > 0.0)` is how configs reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod optim;
mod parallel;
pub mod pretrain;
pub mod rewards;
pub mod rl;
pub mod sft;
pub mod verify;

pub use diffusion::{NoiseSchedule, ReverseCov, ScheduleSpec, Trajectory, X0Mode};
pub use error::{Error, Result};
pub use model::{Arch, Denoiser, DenoiserRef, ParamSnapshot};
pub use rewards::RewardScenario;
pub use rl::{run_dpok, RLConfig};
pub use sft::{run_sft, KlMode, SFTConfig, SFTDataset};
