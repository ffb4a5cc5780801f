//! Deterministic time curves used for preferences, income and floors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic curve on the planning horizon.
///
/// `Exp` evaluates `x0 * exp(lam * t)`. `ScaledExp` is the annuity-style
/// variant `(rate / (e^rate - 1)) * annual * exp(rate * t)` whose integral
/// over the first year equals `annual`; it degrades gracefully to the
/// constant `annual` as `rate -> 0`. `Table` interpolates linearly between
/// sample points and clamps outside the tabulated range.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Curve {
    Exp { x0: f64, lam: f64 },
    ScaledExp { annual: f64, rate: f64 },
    Table { t: Vec<f64>, v: Vec<f64> },
}

impl Curve {
    pub fn constant(x: f64) -> Self {
        Curve::Exp { x0: x, lam: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Curve::Exp { x0, lam } => x0 * (lam * t).exp(),
            Curve::ScaledExp { annual, rate } => {
                if rate.abs() < 1e-12 {
                    *annual
                } else {
                    rate / rate.exp_m1() * annual * (rate * t).exp()
                }
            }
            Curve::Table { t: ts, v } => {
                if t <= ts[0] {
                    return v[0];
                }
                if t >= ts[ts.len() - 1] {
                    return v[v.len() - 1];
                }
                let idx = ts.partition_point(|&x| x <= t) - 1;
                let (t0, t1) = (ts[idx], ts[idx + 1]);
                let w = (t - t0) / (t1 - t0);
                v[idx] * (1.0 - w) + v[idx + 1] * w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Curve::Exp { x0, lam } => {
                if !x0.is_finite() || !lam.is_finite() {
                    return Err(Error::BadCurve("non-finite exponential parameters".into()));
                }
            }
            Curve::ScaledExp { annual, rate } => {
                if !annual.is_finite() || !rate.is_finite() {
                    return Err(Error::BadCurve("non-finite scaled-exp parameters".into()));
                }
            }
            Curve::Table { t, v } => {
                if t.len() != v.len() {
                    return Err(Error::BadCurve(format!(
                        "table lengths differ: {} times vs {} values",
                        t.len(),
                        v.len()
                    )));
                }
                if t.len() < 2 {
                    return Err(Error::BadCurve("table needs at least 2 points".into()));
                }
                if t.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::BadCurve("table times must strictly increase".into()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::BadCurve("table values must be finite".into()));
                }
            }
        }
        Ok(())
    }
}
