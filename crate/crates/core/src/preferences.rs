//! Preference and cashflow model: the weighting curve `a(t)`, risk-aversion
//! curve `b(t)`, terminal parameters, utilities with floors, Arrow-Pratt
//! measures, and the floor value functions.

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::market::MarketParams;
use crate::quadrature::{integrate, QuadSpec};

/// Number of sample points used for curve-domain checks on `[0, T]`.
const DOMAIN_SAMPLES: usize = 2_081;

/// Time preferences: impatience `beta`, consumption weight curve `a(t)`,
/// risk-aversion curve `b(t)` and the terminal pair `(a_hat, b_hat)`.
///
/// `b(t)` must stay below 1, never cross zero, and keep a constant sign;
/// this is enforced on a dense sample grid at construction.
#[derive(Debug, Clone)]
pub struct PreferenceModel {
    beta: f64,
    a_hat: f64,
    b_hat: f64,
    a: Curve,
    b: Curve,
    horizon: f64,
}

impl PreferenceModel {
    pub fn new(
        beta: f64,
        a_hat: f64,
        b_hat: f64,
        a: Curve,
        b: Curve,
        horizon: f64,
    ) -> Result<Self> {
        a.validate()?;
        b.validate()?;
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::BadPreferences(format!(
                "impatience rate must be >= 0, got {beta}"
            )));
        }
        if !(a_hat > 0.0) {
            return Err(Error::BadPreferences(format!(
                "terminal weight must be > 0, got {a_hat}"
            )));
        }
        if !(b_hat < 1.0) || b_hat == 0.0 {
            return Err(Error::BadPreferences(format!(
                "terminal risk parameter must be < 1 and nonzero, got {b_hat}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::BadPreferences(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        let b0_sign = b.eval(0.0).signum();
        for k in 0..DOMAIN_SAMPLES {
            let t = horizon * k as f64 / (DOMAIN_SAMPLES - 1) as f64;
            let at = a.eval(t);
            let bt = b.eval(t);
            if !at.is_finite() || at <= 0.0 {
                return Err(Error::BadPreferences(format!(
                    "a({t}) = {at} must be positive and finite"
                )));
            }
            if !bt.is_finite() || bt >= 1.0 || bt == 0.0 || bt.signum() != b0_sign {
                return Err(Error::BadPreferences(format!(
                    "b({t}) = {bt} must be finite, below 1, nonzero and of constant sign"
                )));
            }
        }
        Ok(Self {
            beta,
            a_hat,
            b_hat,
            a,
            b,
            horizon,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn a_hat(&self) -> f64 {
        self.a_hat
    }

    pub fn b_hat(&self) -> f64 {
        self.b_hat
    }

    pub fn a(&self, t: f64) -> f64 {
        self.a.eval(t)
    }

    pub fn b(&self, t: f64) -> f64 {
        self.b.eval(t)
    }

    pub fn a_curve(&self) -> &Curve {
        &self.a
    }

    pub fn b_curve(&self) -> &Curve {
        &self.b
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Largest deviation of `b(t)` from `b_hat` on the sample grid.
    pub fn max_b_deviation_from_terminal(&self) -> f64 {
        (0..DOMAIN_SAMPLES)
            .map(|k| {
                let t = self.horizon * k as f64 / (DOMAIN_SAMPLES - 1) as f64;
                (self.b.eval(t) - self.b_hat).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Income rate, consumption floor rate, terminal floor and horizon.
#[derive(Debug, Clone)]
pub struct CashflowModel {
    income: Curve,
    consumption_floor: Curve,
    terminal_floor: f64,
    horizon: f64,
}

impl CashflowModel {
    pub fn new(
        income: Curve,
        consumption_floor: Curve,
        terminal_floor: f64,
        horizon: f64,
    ) -> Result<Self> {
        income.validate()?;
        consumption_floor.validate()?;
        if !(horizon > 0.0) {
            return Err(Error::BadCashflows(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if !terminal_floor.is_finite() || terminal_floor < 0.0 {
            return Err(Error::BadCashflows(format!(
                "terminal floor must be >= 0, got {terminal_floor}"
            )));
        }
        for k in 0..DOMAIN_SAMPLES {
            let t = horizon * k as f64 / (DOMAIN_SAMPLES - 1) as f64;
            let yt = income.eval(t);
            let ct = consumption_floor.eval(t);
            if !yt.is_finite() || yt < 0.0 {
                return Err(Error::BadCashflows(format!(
                    "income({t}) = {yt} must be >= 0"
                )));
            }
            if !ct.is_finite() || ct < 0.0 {
                return Err(Error::BadCashflows(format!(
                    "consumption floor({t}) = {ct} must be >= 0"
                )));
            }
        }
        Ok(Self {
            income,
            consumption_floor,
            terminal_floor,
            horizon,
        })
    }

    pub fn income(&self, t: f64) -> f64 {
        self.income.eval(t)
    }

    pub fn consumption_floor(&self, t: f64) -> f64 {
        self.consumption_floor.eval(t)
    }

    pub fn income_curve(&self) -> &Curve {
        &self.income
    }

    pub fn consumption_floor_curve(&self) -> &Curve {
        &self.consumption_floor
    }

    pub fn terminal_floor(&self) -> f64 {
        self.terminal_floor
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Clone with the consumption floor and terminal floor removed, keeping
    /// income; used for the zero-floor model variant.
    pub fn without_floors(&self) -> Self {
        Self {
            income: self.income.clone(),
            consumption_floor: Curve::constant(0.0),
            terminal_floor: 0.0,
            horizon: self.horizon,
        }
    }
}

/// Present value at `t` of the outstanding consumption floor less income:
/// `integral_t^T e^{-r(s-t)} (cbar(s) - y(s)) ds`. May be negative.
pub fn floor_f1(
    market: &MarketParams,
    cashflows: &CashflowModel,
    t: f64,
    quad: &QuadSpec,
) -> Result<f64> {
    let r = market.rate();
    integrate(
        |s| (-r * (s - t)).exp() * (cashflows.consumption_floor(s) - cashflows.income(s)),
        t,
        cashflows.horizon(),
        quad,
    )
}

/// Present value at `t` of the terminal floor: `e^{-r(T-t)} F`.
pub fn floor_f2(market: &MarketParams, cashflows: &CashflowModel, t: f64) -> f64 {
    (-market.rate() * (cashflows.horizon() - t)).exp() * cashflows.terminal_floor()
}

/// Total floor value `F(t) = F1(t) + F2(t)`, the time-t value of all future
/// minimal liabilities less income.
pub fn floor_f(
    market: &MarketParams,
    cashflows: &CashflowModel,
    t: f64,
    quad: &QuadSpec,
) -> Result<f64> {
    Ok(floor_f1(market, cashflows, t, quad)? + floor_f2(market, cashflows, t))
}

/// Present value of a level annuity paid continuously for `years`:
/// `amount * (1 - e^{-years * rate}) / rate`, with the `rate -> 0` limit
/// `amount * years`.
pub fn terminal_floor_from_annuity(rate: f64, years: f64, annual_amount: f64) -> f64 {
    if rate.abs() < 1e-12 {
        annual_amount * years
    } else {
        annual_amount * (-(-years * rate).exp_m1()) / rate
    }
}

/// Consumption utility at `(t, c)`; requires `c` above the floor `cbar(t)`.
pub fn utility_consumption(
    prefs: &PreferenceModel,
    cashflows: &CashflowModel,
    t: f64,
    c: f64,
) -> Result<f64> {
    let floor = cashflows.consumption_floor(t);
    if c <= floor {
        return Err(Error::FloorViolated {
            what: "consumption",
            value: c,
            floor,
        });
    }
    let b = prefs.b(t);
    let weight = (-prefs.beta() * t).exp() * prefs.a(t);
    Ok(weight * (1.0 - b) / b * ((c - floor) / (1.0 - b)).powf(b))
}

/// Terminal-wealth utility at `v`; requires `v` above the terminal floor.
pub fn utility_terminal(prefs: &PreferenceModel, cashflows: &CashflowModel, v: f64) -> Result<f64> {
    let floor = cashflows.terminal_floor();
    if v <= floor {
        return Err(Error::FloorViolated {
            what: "terminal wealth",
            value: v,
            floor,
        });
    }
    let b = prefs.b_hat();
    let weight = (-prefs.beta() * prefs.horizon()).exp() * prefs.a_hat();
    Ok(weight * (1.0 - b) / b * ((v - floor) / (1.0 - b)).powf(b))
}

/// Arrow-Pratt absolute risk aversion of the two utilities:
/// `(1 - b(t)) / (c - cbar(t))` and `(1 - b_hat) / (v - F)`.
pub fn arrow_pratt(
    prefs: &PreferenceModel,
    cashflows: &CashflowModel,
    t: f64,
    c: f64,
    v: f64,
) -> Result<(f64, f64)> {
    let cbar = cashflows.consumption_floor(t);
    if c <= cbar {
        return Err(Error::FloorViolated {
            what: "consumption",
            value: c,
            floor: cbar,
        });
    }
    let f = cashflows.terminal_floor();
    if v <= f {
        return Err(Error::FloorViolated {
            what: "terminal wealth",
            value: v,
            floor: f,
        });
    }
    Ok((
        (1.0 - prefs.b(t)) / (c - cbar),
        (1.0 - prefs.b_hat()) / (v - f),
    ))
}
