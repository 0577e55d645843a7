//! Desk-scale configurations sized for a single CPU core.

use crate::config::{Command, RunConfig};

/// Point-mass actor-critic runs behind the sweeps.
pub fn desk_point_mass() -> RunConfig {
    RunConfig {
        command: Command::Ablate,
        seeds: vec![0, 1, 2],
        n_steps: 20_000,
        batch: 128,
        hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        embed_dim: 16,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        target_period: 1,
        log_every: 1000,
        eval_episodes: 100,
        ..RunConfig::default()
    }
}

/// Toy-density study on all three densities.
pub fn desk_toy() -> RunConfig {
    RunConfig {
        command: Command::ToyStudy,
        density: "all".into(),
        seeds: vec![0, 1, 2],
        ..RunConfig::default()
    }
}

/// Timing run: default batch and batch count on 64-unit networks.
pub fn desk_timing() -> RunConfig {
    RunConfig {
        command: Command::BenchSpeed,
        hidden: vec![64, 64],
        critic_hidden: vec![64, 64],
        embed_dim: 16,
        ..RunConfig::default()
    }
}
