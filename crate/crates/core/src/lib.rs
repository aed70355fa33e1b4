//! CrossMLP cross-view generator: the CrossMLP block, both generator
//! stages, the PatchGAN discriminator, losses, metrics and checkpoints.
//!
//! Everything is generic over the element type; the `*32` / `*64`
//! aliases fix it to `f32` (training) or `f64` (gradient checks).

pub mod checkpoint;
pub mod crossmlp;
pub mod discriminator;
mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod stage1;
pub mod stage2;

pub use checkpoint::{Checkpoint, CHECKPOINT_TAG};
pub use crossmlp::{BlockState, CrossMlpBlock, CrossMlpConfig};
pub use discriminator::PatchDiscriminator;
pub use error::{ModelError, Result};
pub use losses::{AdversarialSide, LossBundle, LossParts, LossWeights};
pub use metrics::{Classifier, MetricReport};
pub use model::{CrossMlpGan, Generator, GeneratorOutput, ModelConfig};
pub use stage1::{Stage1, Stage1Config, Stage1Output};
pub use stage2::{Selection, SelectionOutput, SemanticUnet, Stage2Config};

pub use crossmlp_autograd as autograd;

pub type CrossMlpGan32 = CrossMlpGan<f32>;
pub type CrossMlpGan64 = CrossMlpGan<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;

#[cfg(test)]
pub(crate) mod testing;
