//! The three networks of the alignment loop — one-step generator,
//! assistant score model, frozen reference — plus denoiser/score
//! conversion and guidance.

mod generator;
mod precond;
mod score_model;
mod sources;

pub use generator::{Backbone, Generator};
pub use precond::{denoiser_from_score, effective_sigma, score_from_denoiser, EdmCoeffs};
pub use score_model::{Parameterization, ScoreModel};
pub use sources::{cfg_score, AnalyticScore, GuidedScore, NetworkScore, PushforwardScore, ScoreSource};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{rng::standard_normal, Array};

/// Embedding row per condition: class `c` -> `c`, null -> `num_classes`.
pub(crate) fn class_rows(cond: &[Option<usize>], num_classes: usize) -> Result<Vec<usize>> {
    cond.iter()
        .map(|c| match *c {
            None => Ok(num_classes),
            Some(k) if k < num_classes => Ok(k),
            Some(k) => Err(Error::UnknownClass {
                class: k,
                classes: num_classes,
            }),
        })
        .collect()
}

/// Unit-normal `(K+1) x e` table; the null row is drawn like the others,
/// so it never coincides with a class row.
pub(crate) fn embedding_init<R: Rng + ?Sized>(num_classes: usize, embed_dim: usize, rng: &mut R) -> Array {
    standard_normal(rng, num_classes + 1, embed_dim)
}
