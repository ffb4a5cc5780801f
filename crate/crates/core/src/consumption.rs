//! Solver for the consumption-only problem.
//!
//! Consumption enters the objective through a HARA utility with floor
//! `cbar(t)` and time-varying risk aversion `b(t)`. The optimal policy is a
//! proportional portfolio insurance strategy on the floor `F1(t)` whose
//! multiple depends on a mean-value time inside `(t, T)`; consumption is an
//! explicit function of the pricing kernel once the budget multiplier is
//! known.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::quadrature::{bracket_outward, find_root, integrate};
use crate::ModelContext;

/// Relative weights plus currency exposure of the risky book.
///
/// Weights are reported as zero with `zero_wealth` set when the dividing
/// wealth is numerically zero; the exposure stays valid in that case.
#[derive(Debug, Clone)]
pub struct RiskyPosition {
    pub weights: DVector<f64>,
    pub exposure: DVector<f64>,
    pub zero_wealth: bool,
}

impl RiskyPosition {
    pub(crate) fn from_exposure_scale(
        ctx: &ModelContext,
        scale: f64,
        wealth: f64,
        wealth_scale: f64,
    ) -> Self {
        let exposure = ctx.market.merton_vector() * scale;
        let zero_wealth = wealth.abs() <= 1e-10 * wealth_scale.max(1.0);
        let weights = if zero_wealth {
            DVector::zeros(ctx.market.dim())
        } else {
            &exposure / wealth
        };
        RiskyPosition {
            weights,
            exposure,
            zero_wealth,
        }
    }
}

/// Value function data: level and its first two derivatives with respect
/// to the initial budget.
#[derive(Debug, Clone, Copy)]
pub struct ValueFunction {
    pub value: f64,
    pub first_derivative: f64,
    pub second_derivative: f64,
}

/// Solved consumption-only problem for a given initial budget `v1`.
#[derive(Debug, Clone)]
pub struct ConsumptionSolution {
    ctx: Arc<ModelContext>,
    v1: f64,
    lambda1: f64,
    log_lambda1: f64,
    f1_0: f64,
}

impl ConsumptionSolution {
    /// Solves the budget equation for the multiplier and returns the
    /// assembled solution. Requires `v1 > F1(0)`.
    pub fn solve(ctx: &Arc<ModelContext>, v1: f64) -> Result<Self> {
        let lambda1 = solve_lambda1(ctx, v1)?;
        Self::with_lambda(ctx, v1, lambda1)
    }

    /// Builds the solution from an externally supplied multiplier.
    ///
    /// Used by the merged solver, which knows the multiplier in closed
    /// form, and by sensitivity checks that perturb it deliberately.
    pub fn with_lambda(ctx: &Arc<ModelContext>, v1: f64, lambda1: f64) -> Result<Self> {
        let f1_0 = ctx.floor_f1(0.0)?;
        if v1 <= f1_0 {
            return Err(Error::InfeasibleBudget {
                budget: v1,
                floor: f1_0,
            });
        }
        if !(lambda1 > 0.0) || !lambda1.is_finite() {
            return Err(Error::InfeasibleParams(format!(
                "consumption multiplier must be positive and finite, got {lambda1}"
            )));
        }
        Ok(Self {
            ctx: ctx.clone(),
            v1,
            lambda1,
            log_lambda1: lambda1.ln(),
            f1_0,
        })
    }

    pub fn context(&self) -> &Arc<ModelContext> {
        &self.ctx
    }

    pub fn budget(&self) -> f64 {
        self.v1
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn floor1_at_start(&self) -> f64 {
        self.f1_0
    }

    /// Discounted marginal-consumption kernel `g(s, t)`.
    ///
    /// Computed in log space; positive for all `t <= s <= T` since
    /// `b(s) < 1`.
    pub fn g_kernel(&self, s: f64, t: f64) -> f64 {
        g_eval(&self.ctx, self.log_lambda1, s, t)
    }

    /// Optimal consumption rate at `(t, z)`; strictly above the floor.
    pub fn consumption_rate(&self, t: f64, z: f64) -> f64 {
        let b = self.ctx.prefs.b(t);
        self.g_kernel(t, t) * z.powf(1.0 / (b - 1.0)) + self.ctx.cashflows.consumption_floor(t)
    }

    /// Replicating wealth at `(t, z)`; equals `v1` at `(0, 1)` and 0 at `T`.
    pub fn wealth(&self, t: f64, z: f64) -> Result<f64> {
        let horizon = self.ctx.horizon();
        let log_z = z.ln();
        let cushion = integrate(
            |s| {
                let b = self.ctx.prefs.b(s);
                self.g_kernel(s, t) * (log_z / (b - 1.0)).exp()
            },
            t,
            horizon,
            &self.ctx.quad,
        )?;
        Ok(cushion + self.ctx.floor_f1(t)?)
    }

    /// Scale of the optimal risky exposure: the exposure vector is
    /// `scale * merton_vector`, and `scale >= 0`.
    pub fn exposure_scale(&self, t: f64, z: f64) -> Result<f64> {
        let horizon = self.ctx.horizon();
        let log_z = z.ln();
        let y = integrate(
            |s| {
                let b = self.ctx.prefs.b(s);
                self.g_kernel(s, t) * (log_z / (b - 1.0)).exp() / (b - 1.0)
            },
            t,
            horizon,
            &self.ctx.quad,
        )?;
        Ok(-y)
    }

    /// Mean-value time in `(t, T)` whose risk aversion reproduces the
    /// current PPI multiple.
    ///
    /// The defining equation is `b(s*) = 1 - cushion / exposure_scale`.
    /// When `b` is constant any time works and the midpoint is returned;
    /// otherwise the first sign change on a 64-interval grid is bisected,
    /// taking the smallest root when several exist.
    pub fn mean_value_time(&self, t: f64, z: f64) -> Result<f64> {
        let horizon = self.ctx.horizon();
        if t >= horizon {
            return Err(Error::Degenerate(format!(
                "mean-value time needs t < horizon, got t = {t}"
            )));
        }
        let cushion = self.wealth(t, z)? - self.ctx.floor_f1(t)?;
        let scale = self.exposure_scale(t, z)?;
        let target = 1.0 - cushion / scale;
        solve_mean_value_time(&self.ctx, t, target)
    }

    /// Optimal risky position at `(t, z)`.
    pub fn risky_position(&self, t: f64, z: f64) -> Result<RiskyPosition> {
        let wealth = self.wealth(t, z)?;
        let scale = self.exposure_scale(t, z)?;
        Ok(RiskyPosition::from_exposure_scale(
            &self.ctx,
            scale,
            wealth,
            self.v1.abs().max(self.f1_0.abs()),
        ))
    }
}

fn g_eval(ctx: &ModelContext, log_lambda: f64, s: f64, t: f64) -> f64 {
    let b = ctx.prefs.b(s);
    let log = (ctx.prefs.beta() * s
        - b * ctx.market.risk_adjusted_rate(b) * (s - t)
        - ctx.prefs.a(s).ln()
        + log_lambda)
        / (b - 1.0);
    (1.0 - b) * log.exp()
}

/// Solves the budget equation `integral_0^T g(t, 0) dt = v1 - F1(0)` for
/// the consumption multiplier, searching in log space where the integral
/// is strictly monotone with limits 0 and infinity.
pub fn solve_lambda1(ctx: &Arc<ModelContext>, v1: f64) -> Result<f64> {
    let f1_0 = ctx.floor_f1(0.0)?;
    let target = v1 - f1_0;
    if target <= 0.0 {
        return Err(Error::InfeasibleBudget {
            budget: v1,
            floor: f1_0,
        });
    }
    let horizon = ctx.horizon();
    let residual = |x: f64| -> f64 {
        match integrate(|t| g_eval(ctx, x, t, 0.0), 0.0, horizon, &ctx.quad) {
            Ok(v) => v - target,
            Err(_) => f64::NAN,
        }
    };
    let (lo, hi) = bracket_outward(residual, 0.0, 1.0, 60)?;
    let x = find_root(residual, lo, hi, &ctx.root)?;
    Ok(x.exp())
}

/// Value function of the consumption-only problem and its first two
/// derivatives in the budget; the first derivative is the multiplier.
pub fn value_function(ctx: &Arc<ModelContext>, v1: f64) -> Result<ValueFunction> {
    let lambda1 = solve_lambda1(ctx, v1)?;
    let log_lambda = lambda1.ln();
    let horizon = ctx.horizon();
    let value = integrate(
        |t| {
            let b = ctx.prefs.b(t);
            let log = ((ctx.prefs.beta() - b * ctx.market.risk_adjusted_rate(b)) * t
                - ctx.prefs.a(t).ln()
                + b * log_lambda)
                / (b - 1.0);
            (1.0 - b) / b * log.exp()
        },
        0.0,
        horizon,
        &ctx.quad,
    )?;
    let sensitivity = integrate(
        |t| {
            let b = ctx.prefs.b(t);
            let log = ((ctx.prefs.beta() - b * ctx.market.risk_adjusted_rate(b)) * t
                - ctx.prefs.a(t).ln()
                - (b - 2.0) * log_lambda)
                / (b - 1.0);
            log.exp()
        },
        0.0,
        horizon,
        &ctx.quad,
    )?;
    Ok(ValueFunction {
        value,
        first_derivative: lambda1,
        second_derivative: -1.0 / sensitivity,
    })
}

/// Finds `s*` in `(t, T)` with `b(s*) = target`, preferring the smallest
/// root. Falls back to the midpoint when `b` is flat at the target level.
pub(crate) fn solve_mean_value_time(ctx: &ModelContext, t: f64, target: f64) -> Result<f64> {
    let horizon = ctx.horizon();
    const GRID: usize = 64;
    let h = |s: f64| ctx.prefs.b(s) - target;
    let mut prev_s = t;
    let mut prev_h = h(t);
    let mut max_abs: f64 = prev_h.abs();
    let mut best = (prev_h.abs(), prev_s);
    for k in 1..=GRID {
        let s = t + (horizon - t) * k as f64 / GRID as f64;
        let hs = h(s);
        max_abs = max_abs.max(hs.abs());
        if hs.abs() < best.0 {
            best = (hs.abs(), s);
        }
        if prev_h == 0.0 {
            return Ok(prev_s);
        }
        if prev_h.signum() != hs.signum() {
            // Bisect the first sign-change interval.
            let (mut lo, mut hi) = (prev_s, s);
            let mut h_lo = prev_h;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let hm = h(mid);
                if hm == 0.0 || hi - lo <= 1e-14 * (horizon - t).max(1.0) {
                    return Ok(mid);
                }
                if hm.signum() == h_lo.signum() {
                    lo = mid;
                    h_lo = hm;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        prev_s = s;
        prev_h = hs;
    }
    // Flat b at the target level: any time qualifies, return the midpoint.
    if max_abs <= 1e-9 * (1.0 + target.abs()) {
        return Ok(0.5 * (t + horizon));
    }
    // The mean value theorem guarantees a root of the continuous equation;
    // grid rounding can still miss a tangency, so return the closest point.
    Ok(best.1)
}
