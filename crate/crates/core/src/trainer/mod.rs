//! Training orchestration for every method, checkpointing and synthesis.

mod config;
mod model;
mod regions;
mod session;

pub use config::{Arch, Direction, Method, Preset, RegionsConfig, TrainConfig};
pub use model::{param_digest, synthesize, Batch, Model, Synthesized};
pub use regions::{
    load_regions, region_masks, synthesize_regions, train_h_regions, RegionsModel, RegionsOutcome, SUBTASK_FILES,
};
pub use session::{
    load_checkpoint, prepare_samples, read_log, save_checkpoint, train, views, Checkpoint, TrainOutcome, Trainer,
    CHECKPOINT_FILE, LOG_FILE,
};

/// Seed for an independent random stream derived from `(seed, step, stream)`.
pub fn derive_seed(seed: u64, step: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(stream.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
