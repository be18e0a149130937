//! Executable theorem checks with analytic oracles and negative controls.

mod battery;
mod fields;
mod recovery;
mod report;
mod theorems;

pub use battery::{
    projection_cases, recovery_config, run_battery, theorem1_cases, theorem2_case, two_class_line, two_mode_plane,
    BatteryOptions, EXACT_TOLERANCE, GRADIENT_SAMPLES, MC_TOLERANCE, PROJECTION_SAMPLES,
};
pub use fields::VectorField;
pub use recovery::{check_dsm_recovery, dsm_recovery_control, RecoveryConfig, RECOVERY_TIMES};
pub use report::CheckReport;
pub use theorems::{
    central_difference, check_score_projection, relative_error, score_projection_control, GradientPair,
    GradientPath, RegularizerUnderTest, Theorem1Case, Theorem2Case, DEFAULT_FD_STEP, FD_STABILITY, GH_POINTS,
};
