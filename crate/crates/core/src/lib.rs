//! Adversarially robust transfer learning: tensors, reverse-mode autodiff,
//! layers, ℓ∞ attacks, adversarial and feature-distance training, spectrally
//! normalized fine-tuning, datasets and checkpoints.

pub mod attack;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use attack::{fgsm, pgd, robust_accuracy, AttackConfig, RobustReport};
pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use layers::{BnMode, ForwardCtx};
pub use network::{Aggregation, ArchSpec, Family, Network};
pub use optim::Schedule;
pub use rng::RngState;
pub use tensor::{Real, Tensor};
pub use train::{EpochMetrics, FdmConfig, TrainConfig};
pub use transfer::{BnPolicy, TransferConfig, TransferMode, TransferOutcome};
