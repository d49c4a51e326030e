//! Dynamic Bayesian latent class regression for repeated cross-sectional
//! survey data.
//!
//! Respondents at wave `t` belong to one of `H` latent profiles with
//! probabilities given by a multinomial logit whose intercepts evolve over
//! time under Gaussian-process priors. Inference uses Hamiltonian Monte Carlo
//! on a survey-weighted pseudo-posterior.

pub mod crossval;
pub mod data;
pub mod error;
pub mod fit;
pub mod gp;
pub mod inference;
pub mod model;
pub mod sampler;

pub use crossval::{run_cv, AccuracyTable, CvOptions};
pub use data::{load_csv, Schema, SurveyDataset};
pub use error::{Error, Result};
pub use fit::{fit, FitOptions, InitStrategy};
pub use model::{ModelConfig, Parameters, Posterior};
pub use sampler::{PosteriorDraws, SamplerConfig};
