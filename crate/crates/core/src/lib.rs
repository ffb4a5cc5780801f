//! Closed-form life-cycle consumption and investment policies.
//!
//! The library solves the finite-horizon problem of maximizing expected
//! utility of consumption plus terminal wealth in a Black-Scholes market,
//! for HARA utilities with a time-varying consumption floor, a terminal
//! wealth floor, and age-dependent preference curves `a(t)` and `b(t)`.
//! The solution splits into a consumption-only and a terminal-wealth-only
//! problem joined by an optimal initial budget split; both sub-solutions
//! are available in closed form up to one-dimensional quadrature and
//! scalar root finding.
//!
//! Modules:
//! - [`market`]: validated market parameters, pricing kernel, kernel paths.
//! - [`curves`], [`preferences`]: preference/cashflow curves, utilities, floors.
//! - [`quadrature`]: Gauss-Legendre integration and bracketed root finding.
//! - [`consumption`]: the consumption-only solver (PPI policy).
//! - [`terminal`]: the terminal-wealth-only solver (CPPI policy).
//! - [`policy`]: optimal budget split and the merged policy.
//! - [`simulation`]: expected curves, Monte Carlo, scenario replay.
//! - [`calibration`]: least-squares fitting of the preference parameters.

pub mod calibration;
pub mod consumption;
pub mod curves;
pub mod error;
pub mod market;
pub mod policy;
pub mod preferences;
pub mod quadrature;
pub mod simulation;
pub mod terminal;

#[doc(hidden)]
pub mod testutil;

use std::sync::Arc;

pub use crate::curves::Curve;
pub use crate::error::{Error, Result};
pub use crate::market::MarketParams;
pub use crate::preferences::{CashflowModel, PreferenceModel};
pub use crate::quadrature::{QuadSpec, RootSpec};

/// Market, preferences and cashflows bundled with the numeric settings.
///
/// All solvers take a shared context; the horizon of the preference and
/// cashflow models must agree.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub market: MarketParams,
    pub prefs: PreferenceModel,
    pub cashflows: CashflowModel,
    pub quad: QuadSpec,
    pub root: RootSpec,
}

impl ModelContext {
    pub fn new(
        market: MarketParams,
        prefs: PreferenceModel,
        cashflows: CashflowModel,
    ) -> Result<Arc<Self>> {
        Self::with_numerics(market, prefs, cashflows, QuadSpec::default(), RootSpec::default())
    }

    pub fn with_numerics(
        market: MarketParams,
        prefs: PreferenceModel,
        cashflows: CashflowModel,
        quad: QuadSpec,
        root: RootSpec,
    ) -> Result<Arc<Self>> {
        if (prefs.horizon() - cashflows.horizon()).abs() > 1e-12 {
            return Err(Error::BadCashflows(format!(
                "preference horizon {} differs from cashflow horizon {}",
                prefs.horizon(),
                cashflows.horizon()
            )));
        }
        Ok(Arc::new(Self {
            market,
            prefs,
            cashflows,
            quad,
            root,
        }))
    }

    pub fn horizon(&self) -> f64 {
        self.cashflows.horizon()
    }

    /// `F1(t)`: discounted outstanding consumption floor less income.
    pub fn floor_f1(&self, t: f64) -> Result<f64> {
        preferences::floor_f1(&self.market, &self.cashflows, t, &self.quad)
    }

    /// `F2(t)`: discounted terminal floor.
    pub fn floor_f2(&self, t: f64) -> f64 {
        preferences::floor_f2(&self.market, &self.cashflows, t)
    }

    /// `F(t) = F1(t) + F2(t)`.
    pub fn floor_f(&self, t: f64) -> Result<f64> {
        preferences::floor_f(&self.market, &self.cashflows, t, &self.quad)
    }
}
