//! Loss terms, joint-state datasets, ADAM, and the training loop.

mod adam;
mod dataset;
pub mod losses;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dataset::{build_dataset, BoundarySampling, JointDataset, Pairing, StatePool};
pub use losses::{cbf_violation, combined_loss, residual_hj, sample_terms, PdeTerms};
pub use trainer::{
    train, write_history_csv, LossRecord, NoopObserver, TrainConfig, TrainObserver, TrainOutcome,
};
