//! Training objectives: weighted denoising score matching, the distance
//! family, the tractable score-divergence regularizer, the guidance
//! reward, explicit rewards and the integral-KL baseline.

mod distance;
mod objectives;
mod reward;

pub use distance::DistanceFunction;
pub use objectives::{
    cfg_reward_loss, di_star_reg_loss, dipp_kl_loss, dsm_from_score, dsm_loss, ensure_finite,
    explicit_reward_loss, GeneratorBatch, LossBreakdown, LossContext, NoiseDraw, TermGradNorms,
};
pub use reward::RewardFunction;
