#![allow(dead_code)]

use flap::flap_core::adapter::AdapterConfig;
use flap::flap_core::env::EnvConfig;
use flap::flap_core::meta::{AdaptConfig, TrainConfig};
use flap::flap_core::sac::SacConfig;

/// Seconds-scale configuration for plumbing tests.
pub fn tiny() -> TrainConfig {
    let horizon = 10;
    TrainConfig {
        n_train_tasks: 2,
        n_test_in_dist: 2,
        n_test_ood: 2,
        env: EnvConfig::default().with_horizon(horizon),
        sac: SacConfig::desk(8),
        adapter: AdapterConfig {
            hidden: vec![8],
            ..AdapterConfig::default()
        },
        iterations: 3,
        updates_per_iteration: 2,
        steps_per_task_per_iteration: horizon,
        warmup_steps_per_task: horizon,
        batch_size: 8,
        adapter_batch_size: 8,
        buffer_capacity: 200,
        eval_every: 2,
        eval_adapt: AdaptConfig {
            adaptation_steps: 1,
            ..AdaptConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub const TINY_TOML: &str = r#"
n_train_tasks = 2
n_test_in_dist = 2
n_test_ood = 2
iterations = 3
updates_per_iteration = 2
steps_per_task_per_iteration = 10
warmup_steps_per_task = 10
batch_size = 8
adapter_batch_size = 8
buffer_capacity = 200
eval_every = 2

[env]
horizon = 10

[sac]
policy_hidden = [8, 8, 8]
critic_hidden = [8, 8, 8]

[adapter]
hidden = [8]

[eval_adapt]
adaptation_steps = 1

[eval_adapt.gradient]
env_step_budget = 20
batch_size = 8
"#;
