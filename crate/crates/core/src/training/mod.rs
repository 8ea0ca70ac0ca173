//! Adversarial training, the mirror-pair loss baseline, latent fitting and
//! generator fine-tuning, and evaluation sweeps.

pub mod config;
pub mod eval;
pub mod fit;
pub mod gan;
pub mod persist;

pub use config::{DataConfig, FitTuneConfig, TrainConfig, ALPHA_SOFT, ALPHA_STRONG};
pub use eval::{interpolation_latents, mse_curve, overlay_average, scalar_sweep, yaw_sweep, Pairing, SweepMode};
pub use fit::{fine_tune, fit_z, FitResult, TuneResult};
pub use gan::{gan_step, symmetric_loss, GanState, LatentBatch, StepRecord, Trainer};
pub use persist::{from_checkpoint, load_state, save_state, to_checkpoint};
