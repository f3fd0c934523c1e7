use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("argument outside the supported domain: {0}")]
    Domain(String),

    #[error("Lévy density is singular at the origin")]
    Singularity,

    #[error("quadrature did not converge (partial value {partial:e}, residual {residual:e})")]
    Quadrature { partial: f64, residual: f64 },

    #[error(
        "tempering acceptance rate {rate:.3e} is below the floor {floor:.1e}; use a smaller dt"
    )]
    StepTooLarge { rate: f64, floor: f64 },

    #[error("kernel table built for m*t = {table_mt}, requested m*t = {requested_mt}")]
    StaleTable { table_mt: f64, requested_mt: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient Monte Carlo budget: {0}")]
    InsufficientBudget(String),

    #[error("power-law tail fit is unstable (fitted slope {slope:.3})")]
    TailFit { slope: f64 },
}
