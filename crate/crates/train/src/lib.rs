//! Training, evaluation, generation and ablation for the two-stage
//! cross-view generator, plus the pieces the `crossmlp` binary wires up.

pub mod ablate;
pub mod config;
mod error;
pub mod eval;
pub mod generate;
pub mod run;
pub mod state;
pub mod step;

#[cfg(test)]
pub(crate) mod testing;

pub use ablate::{ablate, ablation_table, AblationAxis, AblationRow, BLOCK_VALUES};
pub use config::{PixelLoss, Precision, RunConfig, SEED_ENV};
pub use error::{Result, TrainError};
pub use eval::{evaluate, ClassifierSource, ProbsFile};
pub use generate::generate;
pub use run::{train, train_loop, RunSummary};
pub use state::{checkpoint_precision, initialize, TrainState};
pub use step::{fake_logits, train_step, StepRecord};

pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
