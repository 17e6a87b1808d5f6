//! Variational Laplace inference for nonlinear and categorical generative
//! models, with Gamma precision hyperparameters and exact evidence for
//! general linear models.

pub mod energy;
pub mod error;
pub mod experiments;
pub mod glm;
pub mod gradcheck;
pub mod io;
pub mod hyperparams;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod quadrature;
pub mod special;

pub use error::{Error, Result, ValidationReport};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/hyperparameters.md")]
    mod hyperparameters {}
    #[doc = include_str!("../../../book/src/evidence.md")]
    mod evidence {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
