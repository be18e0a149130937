//! Alternating assistant / generator optimization.

mod align;
mod config;
mod dsm;
mod metrics;
mod state;

pub use align::{
    class_probs, eval_draw, evaluate, evaluate_samples, reference_samples, run, sample_classes, update_assistant,
    update_generator, Evaluation, Reference, RunOutputs, RunResult, SampleFile, LOG_RATIO_TIMES, SAMPLES_FORMAT,
};
pub use config::{
    AlignmentConfig, AssistantSpec, Baseline, DsmSettings, EvalSpec, GeneratorBackbone, GeneratorSpec, Preset,
    ReferenceSpec, ScoreModelSpec,
};
pub use dsm::{dsm_step, sample_labeled, ScoreCheckpoint, ScoreTrainer, SCORE_FORMAT};
pub use metrics::{
    energy_distance, mean_reward, target_components, target_mode_fraction, write_dsm_metrics, write_metrics,
    MetricsRow, Provenance, METRICS_COLUMNS,
};
pub use state::{assistant_spec, GeneratorCheckpoint, TrainCheckpoint, TrainState, GENERATOR_FORMAT, TRAIN_FORMAT};
