//! Monte Carlo and closed-form checks of reconstruction bias and variance.

mod fixtures;
mod monte_carlo;
mod profile;
pub mod stats;
mod theory;

pub use fixtures::{matrix_with_spectrum, uniform_tail_matrix, uniform_tail_spectrum};
pub use monte_carlo::{
    expected_projector_moment, gradient_estimator_moments, gradient_estimator_study,
    mc_projector_second_moment, mc_reconstruction_moments, mc_reconstruction_study, MomentReport,
    MonteCarloStudy, SecondMomentEstimate, MIN_TRIALS, ROUNDOFF_FLOOR,
};
pub use profile::{spectral_profile, DegenerateProfile};
pub use theory::{minimax_lower_bound, theoretical_variance, VarianceInput};
