//! Closed-form oracles: Gaussian and mixture scores, diffused marginals,
//! affine-generator pushforwards and the time-integral score divergence.

mod affine;
mod gmm;
mod oracle;
mod quadrature;

pub use affine::{AffineGenerator, DEFAULT_SIGMA_INIT};
pub use gmm::{gaussian_score, ComponentSpec, Gaussian, GaussianMixture, GmmSpec};
pub use oracle::{
    divergence_exact, divergence_frozen, divergence_oracle, DivergenceEstimate, DivergenceSetup,
    FrozenSamples, OracleMethod,
};
pub use quadrature::{gauss_hermite, gauss_hermite_grid, TimeGrid, DEFAULT_GRID_POINTS};
