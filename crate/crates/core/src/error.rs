use thiserror::Error;

use crate::decomposition::DecompError;
use crate::engine::EvalError;
use crate::estimand::{DenseError, ParseError};
use crate::factor::FactorError;
use crate::model::ModelError;
use crate::scm::SimError;

/// Any error the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    Decomposition(#[from] DecompError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
