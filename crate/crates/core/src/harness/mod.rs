//! Two-stage training, checkpointing and evaluation drivers.
//!
//! Every random stream is derived from the run seed plus a fixed tag and
//! counters (epoch, sample index), so results do not depend on batch
//! boundaries or on which samples were drawn before.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, DatasetSummary, ParamEntry, ResumeState, FORMAT_VERSION, MAGIC};
pub use config::{ConditionMode, LrDecay, Stage, TrainConfig};
pub use eval::{
    evaluate, generate, reconstruct_eval, Evaluation, ManifestEntry, ReconEval, Reconstructor, SampleOptions, VaeReconstructor,
};
pub use optim::Adam;
pub use train::{
    load_dit, load_vae, log_csv, summarize_dataset, train_ldm, train_ldm_with, train_vae, train_vae_with, EpochLog,
    TrainOutcome,
};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E4B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream identified by `parts` under `seed`.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, parts))
}

/// Stream tags.
pub(crate) mod tag {
    pub const VAE_INIT: u64 = 1;
    pub const DIT_INIT: u64 = 2;
    pub const ORDER: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const GENERATE: u64 = 5;
}
