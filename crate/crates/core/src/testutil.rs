//! Shared fixtures for unit and integration tests.

use std::sync::Arc;

use crate::curves::Curve;
use crate::market::MarketParams;
use crate::preferences::{CashflowModel, PreferenceModel};
use crate::ModelContext;

/// Single-asset reference market: r = 0.5%, mu = 5%, sigma = 20%, p = 100.
pub fn reference_market() -> MarketParams {
    MarketParams::single_asset(0.005, 0.05, 0.2, 100.0).unwrap()
}

/// Reference cashflows: growing income and consumption floor annuities over
/// a 40-year horizon with a 435,125 terminal floor.
pub fn reference_cashflows() -> CashflowModel {
    CashflowModel::new(
        Curve::ScaledExp {
            annual: 26_200.0,
            rate: 0.0207,
        },
        Curve::ScaledExp {
            annual: 14_880.0,
            rate: 0.0193,
        },
        435_125.0,
        40.0,
    )
    .unwrap()
}

/// Reference preference curves: the best-fit exponential parameter set for
/// the bundled hump/glide target curves.
pub fn reference_prefs() -> PreferenceModel {
    PreferenceModel::new(
        0.03,
        1.0,
        -0.9849,
        Curve::Exp {
            x0: 5.2864e7,
            lam: -0.6673,
        },
        Curve::Exp {
            x0: -4.9731,
            lam: -0.0340,
        },
        40.0,
    )
    .unwrap()
}

/// Flat-preference variant with `b(t)` pinned to `b_hat`, the setting in
/// which the merged policy collapses to a single CPPI strategy.
pub fn reference_prefs_constant() -> PreferenceModel {
    PreferenceModel::new(
        0.03,
        1.0,
        -0.8247,
        Curve::constant(0.3425e7),
        Curve::constant(-0.8247),
        40.0,
    )
    .unwrap()
}

/// Full reference context at default numerics.
pub fn reference_context() -> Arc<ModelContext> {
    ModelContext::new(reference_market(), reference_prefs(), reference_cashflows()).unwrap()
}

/// Reference context with constant preferences (`b(t) = b_hat` case).
pub fn reference_context_constant_b() -> Arc<ModelContext> {
    ModelContext::new(
        reference_market(),
        reference_prefs_constant(),
        reference_cashflows(),
    )
    .unwrap()
}

/// Initial endowment used throughout the reference scenario.
pub const REFERENCE_V0: f64 = 250_000.0;
