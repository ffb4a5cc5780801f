use thiserror::Error;

/// Errors produced by the solvers and supporting numerics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NonPositiveDefinite { min_eigenvalue: f64 },

    #[error("drift of asset {asset} does not exceed the risk-free rate")]
    DriftBelowRiskFree { asset: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    BadDimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("risk-free rate must be positive, got {0}")]
    NonPositiveRate(f64),

    #[error("invalid curve: {0}")]
    BadCurve(String),

    #[error("invalid preference parameters: {0}")]
    BadPreferences(String),

    #[error("invalid cashflow parameters: {0}")]
    BadCashflows(String),

    #[error("{what} = {value} is at or below its floor {floor}")]
    FloorViolated {
        what: &'static str,
        value: f64,
        floor: f64,
    },

    #[error("budget {budget} does not exceed the floor value {floor}")]
    InfeasibleBudget { budget: f64, floor: f64 },

    #[error("initial endowment {endowment} does not exceed the total floor value {floor}")]
    InfeasibleEndowment { endowment: f64, floor: f64 },

    #[error("infeasible parameters: {0}")]
    InfeasibleParams(String),

    #[error("no sign change in [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("root finder did not converge within {0} iterations")]
    MaxIterations(usize),

    #[error("integrand returned a non-finite value at t = {at}")]
    NonFinite { at: f64 },

    #[error("degenerate query: {0}")]
    Degenerate(String),

    #[error("wealth is numerically zero; relative weights are undefined")]
    ZeroWealth,

    #[error("risk-aversion curve is not constant (max deviation {max_deviation:e})")]
    NotConstantB { max_deviation: f64 },

    #[error("scenario replay supports a single risky asset, market has {0}")]
    MultiAssetUnsupported(usize),

    #[error("scenario price must be positive, got {price} at t = {t}")]
    NonPositivePrice { t: f64, price: f64 },

    #[error("expected wealth is numerically zero at t = {0}")]
    ZeroExpectedWealth(f64),

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, Error>;
