#![allow(dead_code)]

use genb::biasworld::{generate_split, DatasetSpec, SplitBundle, SplitTag};
use genb::trainer::TrainConfig;

pub fn tiny_splits(seed: u64) -> (SplitBundle, SplitBundle) {
    let spec = DatasetSpec {
        train_size: 96,
        test_size: 48,
        seed,
        ..DatasetSpec::default()
    };
    (
        generate_split(&spec, SplitTag::Train).unwrap(),
        generate_split(&spec, SplitTag::Test).unwrap(),
    )
}

/// Narrow networks and short diagnostics so a full run takes well under a second.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        hidden_dim: 12,
        question_dim: 6,
        noise_dim: 6,
        gen_hidden: 8,
        disc_hidden: 8,
        prior_noise_draws: 50,
        attention_study_draws: 3,
        attention_study_instances: 2,
        ..TrainConfig::default()
    }
}
pub mod gradcheck;
