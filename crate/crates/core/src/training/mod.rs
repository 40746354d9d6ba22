//! Losses, optimiser, augmentation, synthetic corpus, checkpoints and the
//! training loop.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod denoiser_net;
pub mod loss;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use augment::{augment, AugmentedPair, Transform};
pub use checkpoint::Checkpoint;
pub use corpus::{make_corpus, CorpusPair, CorpusSpec, Family, RefPolicy};
pub use denoiser_net::LearnedTinyDenoiser;
pub use loss::{composite_loss, Discriminator, LossConfig, LossTerms};
pub use trainer::{prepare_pair, train, EpochLog, PreparedPair, TrainConfig, TrainOutcome};
