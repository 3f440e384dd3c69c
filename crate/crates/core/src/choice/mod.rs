//! Utility specification, logit probabilities and the MNL / panel mixed
//! logit log-likelihoods.

mod data;
mod draws;
mod likelihood;
mod params;

use thiserror::Error;

pub use data::{
    design_row, observable_utility, read_observations, write_observations, ChoiceObservation, DesignPanel, NearRule,
    ObsDesign, PanelDataset, UserDesign,
};
pub use draws::{DrawKind, DrawMatrix};
pub use likelihood::{
    mixed_probabilities, mnl_loglik, mnl_probabilities, mxl_simulated_loglik, mxl_simulated_loglik_raw, null_loglik,
};
pub use params::{Coef, ModelKind, ParameterSet, K};

#[derive(Debug, Error)]
pub enum ChoiceError {
    #[error("observation of user `{0}` has an empty choice set")]
    EmptyChoiceSet(String),
    #[error("observation of user `{user}` chooses index {chosen} of {m} alternatives")]
    ChosenOutOfRange { user: String, chosen: usize, m: usize },
    #[error("simulated likelihood needs at least one draw")]
    NoDraws,
    #[error("draw matrix covers {have} users with {dims} dimensions; panel has {users} users")]
    DrawShape { users: usize, have: usize, dims: usize },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
