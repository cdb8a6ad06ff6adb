//! Experiment orchestration: end-to-end runs, metrics, ablations, sweeps and
//! report files.

pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod studies;

pub use experiment::{
    run_experiment, CorpusSource, ExperimentConfig, LossKind, RunOutput, Toggles, TrainedClassifier,
};
pub use metrics::{compute_metrics, MetricsReport};
pub use studies::{ablation_grid, augmentation_study, export_embeddings, gamma_sweep};

/// Derives an independent seed for a sub-task from `seed` and a path of
/// indices (SplitMix64 finalizer applied per component). The accumulator is
/// rotated before mixing so `seed_for(s, &[s])` does not cancel to a constant.
pub fn seed_for(seed: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(seed), |acc, &p| mix(acc.rotate_left(23) ^ mix(p)))
}
